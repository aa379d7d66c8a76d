//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvc_core::data::features::{decode_features, encode_features};
use ssvc_core::data::{synth_generate, SynthSpec, VideoSequence};
use ssvc_core::experiment::{ablate, train_run, RunConfig};
use ssvc_core::gradcheck::gradcheck;
use ssvc_core::layers::Activation;
use ssvc_core::metrics::{corpus_bleu, ss_aggregate, ss_caption_score, JudgmentRecord};
use ssvc_core::network::{decode_checkpoint, encode_checkpoint, SsvcConfig, SsvcParams};
use ssvc_core::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = gradcheck(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let prim = report
        .checks
        .iter()
        .filter(|c| c.name != "ssvc_end_to_end")
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    let e2e = report
        .checks
        .iter()
        .find(|c| c.name == "ssvc_end_to_end")
        .ok_or("no end-to-end check")?
        .max_relative_error;
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    ensure(failed.is_empty(), || format!("failing checks: {failed:?}"))?;
    ensure(prim < 1e-4, || format!("primitive max rel err {prim:e}"))?;
    ensure(e2e < 1e-3, || format!("end-to-end max rel err {e2e:e}"))?;
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{} checks, primitives max {prim:.2e} (< 1e-4), end-to-end {e2e:.2e} (< 1e-3), {:.2}s",
        report.checks.len(),
        elapsed.as_secs_f64()
    ))
}

fn random_config(rng: &mut ChaCha8Rng) -> SsvcConfig {
    let enc_units = rng.random_range(1..=4);
    SsvcConfig {
        frames_per_seq: rng.random_range(1..=10),
        feature_dim: rng.random_range(1..=6),
        td_units: rng.random_range(1..=5),
        td_activation: if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Relu
        },
        enc_units,
        enc_layers: rng.random_range(1..=3),
        dec_units: 2 * enc_units,
        attn_units: rng.random_range(1..=5),
        stack_units: rng.random_range(1..=5),
        stack_activation: if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::Tanh
        },
        shp_units: rng.random_range(0..=3),
        embed_dim: rng.random_range(1..=4),
        vocab_size: rng.random_range(5..=9),
        max_caption_len: 4,
        embeddings_trainable: true,
    }
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut maps = 0usize;
    for trial in 0..1000 {
        let config = random_config(&mut rng);
        let mut params = SsvcParams::new(config.clone(), trial).map_err(|e| e.to_string())?;
        // Spread parameter magnitudes so some scorers are near-uniform and
        // others nearly one-hot.
        let scale = [0.5, 2.0, 8.0][trial as usize % 3];
        for id in params.store.ids().collect::<Vec<_>>() {
            for x in params.store.get_mut(id).data_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
        let frames: Vec<f64> = (0..config.frames_per_seq * config.feature_dim)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let frames = Tensor::new(vec![config.frames_per_seq, config.feature_dim], frames).unwrap();
        let trace = params.infer_traced(&frames, 3).map_err(|e| e.to_string())?;
        for (step, (weights, contexts)) in trace.attention.iter().zip(&trace.contexts).enumerate() {
            for (layer, (w, c)) in weights.iter().zip(contexts).enumerate() {
                let at = || format!("trial {trial} step {step} layer {layer}");
                let sum: f64 = w.data().iter().sum();
                ensure((sum - 1.0).abs() <= 1e-6, || {
                    format!("{}: weights sum to {sum}", at())
                })?;
                ensure(w.data().iter().all(|&x| x >= 0.0), || {
                    format!("{}: negative weight", at())
                })?;
                let h = &trace.h_layers[layer];
                for j in 0..h.shape()[1] {
                    let col: Vec<f64> = (0..h.shape()[0]).map(|t| h.row(t)[j]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let cj = c.data()[j];
                    ensure(cj >= lo - 1e-12 && cj <= hi + 1e-12, || {
                        format!("{}: context[{j}] = {cj} outside [{lo}, {hi}]", at())
                    })?;
                }
                maps += 1;
            }
        }
    }
    Ok(format!(
        "1000 random configurations, {maps} attention maps checked"
    ))
}

fn desk_run(
    seed: u64,
    epochs: usize,
) -> (
    RunConfig,
    ssvc_core::data::Dataset,
    ssvc_core::data::Dataset,
) {
    let ds = synth_generate(&SynthSpec {
        seed,
        n_samples: 96,
        n_objects: 4,
        n_actions: 4,
        frames: 6,
        dim: 24,
    })
    .unwrap();
    let (train, val) = ds.split_tail(32);
    (
        RunConfig::new(SsvcConfig::desk(0), seed, epochs),
        train,
        val,
    )
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let (mut run, train, val) = desk_run(42, 300);
    run.target_exact_match = Some(0.9);
    let outcome =
        train_run(&run, &train, Some(&val), None, false, |_| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let best = outcome
        .history
        .iter()
        .filter_map(|m| m.val_exact_match)
        .fold(0.0, f64::max);
    let epochs = outcome.history.len();
    ensure(best >= 0.9, || {
        format!("best held-out exact match {best:.3} after {epochs} epochs")
    })?;
    ensure(epochs <= 300, || format!("{epochs} epochs"))?;
    ensure(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "held-out exact match {best:.3} (>= 0.9) at epoch {epochs}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn ablation_shape() -> Outcome {
    let (run, train, val) = desk_run(3, 5);
    let rows = ablate(&run, &train, &val, &[1, 2, 3], &[0, 8]).map_err(|e| e.to_string())?;
    ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;
    for r in &rows {
        let metrics = [
            r.final_train_loss,
            r.val_loss,
            r.exact_match,
            r.bleu1,
            r.bleu2,
            r.bleu3,
            r.bleu4,
            r.wall_seconds,
        ];
        ensure(metrics.iter().all(|m| m.is_finite()), || {
            format!("non-finite metric in {r:?}")
        })?;
        ensure(r.epochs_run > 0 && !r.config_hash.is_empty(), || {
            format!("incomplete row {r:?}")
        })?;
    }
    let mut grid: Vec<(usize, usize)> = rows.iter().map(|r| (r.enc_layers, r.shp_units)).collect();
    grid.sort();
    ensure(
        grid == [(1, 0), (1, 8), (2, 0), (2, 8), (3, 0), (3, 8)],
        || format!("grid {grid:?}"),
    )?;
    Ok("6 rows over layers {1,2,3} x shp {0,8}, all metrics populated".into())
}

fn oracle_bleu(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>], k: usize) -> f64 {
    let count = |s: &[u8], g: &[u8]| s.windows(g.len()).filter(|w| *w == g).count();
    let mut log_p = 0.0;
    for n in 1..=k {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<&[u8]> = Vec::new();
            for g in c.windows(n) {
                total += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let max_ref = rs.iter().map(|r| count(r, g)).max().unwrap_or(0);
                matched += count(c, g).min(max_ref);
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            rs.iter()
                .map(|r| r.len())
                .min_by_key(|&l| (l.abs_diff(c.len()), l))
                .unwrap()
        })
        .sum();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_p / k as f64).exp()
}

fn bleu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for corpus in 0..500 {
        let n = rng.random_range(1..=4);
        let vocab = rng.random_range(2..=5u8);
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..rng.random_range(1..=8))
                .map(|_| rng.random_range(0..vocab))
                .collect()
        };
        let cands: Vec<Vec<u8>> = (0..n).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<Vec<u8>>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..=3))
                    .map(|_| sentence(&mut rng))
                    .collect()
            })
            .collect();
        let report = corpus_bleu(&cands, &refs).map_err(|e| e.to_string())?;
        for k in 1..=4 {
            let diff = (report.bleu(k) - oracle_bleu(&cands, &refs, k)).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-12, || {
                format!("corpus {corpus} BLEU{k} differs by {diff:e}")
            })?;
        }
    }
    let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let hand = corpus_bleu(
        &[toks("the cat sat")],
        &[vec![toks("the cat sat on the mat")]],
    )
    .map_err(|e| e.to_string())?;
    let e_inv = (-1f64).exp();
    ensure(
        (hand.bleu1 - e_inv).abs() <= 1e-6 && (hand.bleu2 - e_inv).abs() <= 1e-6,
        || format!("hand example BLEU1 {} BLEU2 {}", hand.bleu1, hand.bleu2),
    )?;
    Ok(format!(
        "500 corpora, max |diff| {worst:.1e} (<= 1e-12); hand example BLEU1 = BLEU2 = e^-1"
    ))
}

fn judgment(
    video: &str,
    annotator: &str,
    grammar: bool,
    er: &[bool],
    ep: &[bool],
    ar: bool,
    ap: bool,
) -> JudgmentRecord {
    JudgmentRecord {
        video_id: video.into(),
        caption: "a man is slicing a tomato".into(),
        annotator_id: annotator.into(),
        s_grammar: grammar,
        element_recall: er.to_vec(),
        element_precision: ep.to_vec(),
        action_recall: ar,
        action_precision: ap,
        timestamp: None,
    }
}

fn ss_arithmetic() -> Outcome {
    let worked = judgment("v1", "a", true, &[true, false], &[true], true, false);
    let s = ss_caption_score(std::slice::from_ref(&worked)).map_err(|e| e.to_string())?;
    ensure(s == 0.625, || format!("worked example gives {s}"))?;
    let zero = judgment("v2", "a", false, &[true], &[true], true, true);
    ensure(zero.score() == 0.0, || {
        format!("grammar 0 gives {}", zero.score())
    })?;
    let agg = ss_aggregate(&[worked, zero])
        .map_err(|e| e.to_string())?
        .ss_score;
    ensure(agg == 0.3125, || format!("aggregate gives {agg}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let mut records: Vec<JudgmentRecord> = (0..rng.random_range(1..=6))
            .map(|a| {
                let bools = |rng: &mut ChaCha8Rng| -> Vec<bool> {
                    (0..rng.random_range(0..4))
                        .map(|_| rng.random_bool(0.5))
                        .collect()
                };
                let er = bools(&mut rng);
                let ep = bools(&mut rng);
                judgment(
                    "v",
                    &format!("ann{a}"),
                    rng.random_bool(0.8),
                    &er,
                    &ep,
                    rng.random_bool(0.5),
                    rng.random_bool(0.5),
                )
            })
            .collect();
        let before = ss_caption_score(&records).map_err(|e| e.to_string())?;
        records.shuffle(&mut rng);
        let after = ss_caption_score(&records).map_err(|e| e.to_string())?;
        ensure(before == after, || {
            format!("case {case}: {before} != {after} after permutation")
        })?;
    }
    Ok(
        "worked example 0.625, grammar 0 gives 0, aggregate 0.3125, 500 permutations invariant"
            .into(),
    )
}

fn persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = synth_generate(&SynthSpec {
        seed: 1,
        n_samples: 16,
        n_objects: 4,
        n_actions: 4,
        frames: 6,
        dim: 24,
    })
    .unwrap();
    let vocab = ds.build_vocab();
    for seed in 0..5 {
        let params =
            SsvcParams::new(SsvcConfig::desk(vocab.len()), seed).map_err(|e| e.to_string())?;
        let bytes = encode_checkpoint(&params, &vocab);
        let back = decode_checkpoint(&bytes, None).map_err(|e| e.to_string())?;
        ensure(
            encode_checkpoint(&back.params, &back.vocab) == bytes,
            || format!("checkpoint seed {seed} not byte-exact"),
        )?;
    }
    let mut videos = ds.videos.clone();
    videos.push(
        VideoSequence::new(
            "odd",
            Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3, -0.0, 7.5]).unwrap(),
        )
        .unwrap(),
    );
    let features = encode_features(&videos).map_err(|e| e.to_string())?;
    let decoded = decode_features(&features).map_err(|e| e.to_string())?;
    ensure(
        encode_features(&decoded).map_err(|e| e.to_string())? == features,
        || "SVFT not byte-exact".into(),
    )?;

    let words = ["a", "b", "c"].map(String::from);
    let checkpoint = encode_checkpoint(
        &SsvcParams::new(SsvcConfig::mini(), 0).unwrap(),
        &ssvc_core::data::Vocabulary::build([&words[..]]),
    );
    let mut mutations = 0;
    for pos in 0..4 {
        for delta in 1..=255u8 {
            let mut ck = checkpoint.clone();
            ck[pos] = ck[pos].wrapping_add(delta);
            ensure(decode_checkpoint(&ck, None).is_err(), || {
                format!("checkpoint magic byte {pos} +{delta} accepted")
            })?;
            let mut ft = features.clone();
            ft[pos] = ft[pos].wrapping_add(delta);
            ensure(decode_features(&ft).is_err(), || {
                format!("SVFT magic byte {pos} +{delta} accepted")
            })?;
            mutations += 2;
        }
    }
    for _ in 0..200 {
        let mut ck = checkpoint.clone();
        let mut ft = features.clone();
        for b in ck.iter_mut().take(4).chain(ft.iter_mut().take(4)) {
            *b = rng.random();
        }
        ensure(
            &ck[..4] == b"SSVC" || decode_checkpoint(&ck, None).is_err(),
            || "random checkpoint magic accepted".into(),
        )?;
        ensure(&ft[..4] == b"SVFT" || decode_features(&ft).is_err(), || {
            "random SVFT magic accepted".into()
        })?;
        mutations += 2;
    }
    Ok(format!(
        "checkpoint and SVFT round trips byte-exact; {mutations} corrupted magics rejected"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradient correctness", gradient_correctness),
        ("attention invariants", attention_invariants),
        ("synthetic learnability", learnability),
        ("ablation harness shape", ablation_shape),
        ("BLEU oracle equivalence", bleu_oracle),
        ("SS arithmetic", ss_arithmetic),
        ("persistence and formats", persistence),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
