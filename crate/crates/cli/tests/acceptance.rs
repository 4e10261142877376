//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tbve_core::audio::AudioClip;
use tbve_core::conditioning::{kl_closed_form, kl_term, speaker_embedding, Embedding, EmbeddingMode, FallbackProvider, RefMode, ReferenceEncoder};
use tbve_core::corpus::{prepare_data, toy, Corpus};
use tbve_core::editing::{context_columns, edit, splice_samples, EditContext, EditRequest, FadeShape};
use tbve_core::eval::{boundary_discontinuity, boundary_margin, cosine, f0_rmse_and_vuv, mcd};
use tbve_core::features::{BaselineVocoder, FrameRange, FrameSpec, Vocoder, VocoderFeatures, FEATURE_DIM};
use tbve_core::model::{length_regulate, AcousticModel, FeatureNorm, ModelConfig, UtteranceInput};
use tbve_core::nn::{Graph, Matrix};
use tbve_core::training::{
    compute_loss, evaluate_loss, loss_graph, reference_input, sample_mask, span_length, train_step,
    write_checkpoint, Checkpoint, LossItem, MaskSpec, PreparedExample, TrainConfig, TrainState, TrainingExample,
    VarianceValues,
};
use tbve_service::ServiceConfig;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny(embedding_mode: EmbeddingMode, ref_mode: RefMode) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        ffn_dim: 16,
        encoder_blocks: 1,
        coarse_blocks: 1,
        fine_blocks: 1,
        embedding_mode,
        ref_mode,
        ..Default::default()
    }
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize) -> VocoderFeatures {
    let data = (0..frames * FEATURE_DIM)
        .map(|i| match i % FEATURE_DIM {
            0 if rng.gen_bool(0.3) => 0.0,
            0 => rng.gen_range(80.0..300.0),
            c if c >= 14 => rng.gen_range(0.0..1.0),
            _ => rng.gen_range(-20.0..20.0),
        })
        .collect();
    VocoderFeatures::from_frames(data).unwrap()
}

fn random_example(rng: &mut ChaCha8Rng, id: usize, inventory: usize, with_embedding: bool) -> TrainingExample {
    let phones = rng.gen_range(2..9);
    let durations: Vec<usize> = (0..phones).map(|_| rng.gen_range(1..6)).collect();
    let frames = durations.iter().sum();
    TrainingExample {
        id: format!("u{id}"),
        phones: (0..phones).map(|_| rng.gen_range(0..inventory as u32)).collect(),
        durations,
        features: random_features(rng, frames),
        embedding: with_embedding.then(|| Embedding::new((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()),
    }
}

// ---------------------------------------------------------------- criteria

/// The forward pass is computed once; the loss is then built twice on the
/// same predictions, once against targets whose unmasked rows are perturbed.
fn masked_loss_isolation() -> Check {
    let inventory: Vec<String> = (0..8).map(|i| format!("P{i}")).collect();
    let mut teeth = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let emb = *EmbeddingMode::ALL.choose(&mut rng).unwrap();
        let rm = *RefMode::ALL.choose(&mut rng).unwrap();
        let n = rng.gen_range(1..4);
        let examples: Vec<TrainingExample> = (0..n)
            .map(|i| random_example(&mut rng, i, inventory.len(), emb != EmbeddingMode::None))
            .collect();
        let norm = FeatureNorm::fit(examples.iter().map(|e| &e.features));
        let model = AcousticModel::new(tiny(emb, rm), inventory.clone(), norm, trial).map_err(|e| e.to_string())?;
        let prepared: Vec<PreparedExample> = examples.iter().map(|e| PreparedExample::new(e, &model).unwrap()).collect();
        let masks: Vec<MaskSpec> = prepared
            .iter()
            .map(|p| sample_mask(p.phones.len(), &mut rng, [0.2, 1.0]).with_durations(&p.durations))
            .collect();
        let cfg = TrainConfig {
            kl_weight: rng.gen_range(0.0..1.0),
            ..TrainConfig::default()
        };

        let mut g = Graph::train(ChaCha8Rng::seed_from_u64(trial));
        let frame_flags: Vec<Vec<bool>> = prepared.iter().zip(&masks).map(|(p, m)| m.frame_flags(p.target.rows())).collect();
        let phone_flags: Vec<Vec<bool>> = prepared.iter().zip(&masks).map(|(p, m)| m.phone_flags(p.phones.len())).collect();
        let ref_in: Vec<Matrix> = prepared
            .iter()
            .zip(&frame_flags)
            .map(|(p, f)| reference_input(&p.target, f, false))
            .collect();
        let refs = model
            .encode_references(&mut g, &ref_in.iter().collect::<Vec<_>>())
            .map_err(|e| e.to_string())?;
        let kl = match &refs {
            Some(r) => r.kl,
            None => g.constant(Matrix::zeros(1, 1)),
        };
        let mut outs = Vec::new();
        for (i, p) in prepared.iter().enumerate() {
            let reference = refs.as_ref().map(|r| g.slice_rows(r.encoding, i, i + 1));
            let input = UtteranceInput {
                phones: &p.phones,
                phone_masked: &phone_flags[i],
                durations: &p.durations,
                phone_f0: &p.f0_targets,
                context: &p.target,
                frame_masked: &frame_flags[i],
                embedding: p.embedding.as_deref(),
            };
            outs.push(model.forward(&mut g, &input, reference).map_err(|e| e.to_string())?);
        }

        let perturb = |rng: &mut ChaCha8Rng, masked_rows: bool| -> Vec<Matrix> {
            prepared
                .iter()
                .zip(&frame_flags)
                .map(|(p, flags)| {
                    let mut t = p.target.clone();
                    for (row, &m) in flags.iter().enumerate() {
                        if m == masked_rows {
                            for d in 0..FEATURE_DIM {
                                t.set(row, d, t.get(row, d) + rng.gen_range(-5.0..5.0));
                            }
                        }
                    }
                    t
                })
                .collect()
        };
        let unmasked_perturbed = perturb(&mut rng, false);
        let masked_perturbed = perturb(&mut rng, true);
        let total = |g: &mut Graph, targets: &[&Matrix]| -> f64 {
            let items: Vec<LossItem<'_>> = prepared
                .iter()
                .zip(&masks)
                .zip(&outs)
                .zip(targets)
                .map(|(((p, m), o), t)| LossItem {
                    coarse: o.coarse,
                    fine: o.fine,
                    target: t,
                    masked: &m.frame_ranges,
                    log_durations: o.log_durations,
                    duration_targets: &p.duration_targets,
                    phone_f0: o.phone_f0,
                    f0_targets: &p.f0_targets,
                })
                .collect();
            let vars = loss_graph(g, &items, kl, &cfg).unwrap();
            vars.breakdown(g).total
        };
        let base = total(&mut g, &prepared.iter().map(|p| &p.target).collect::<Vec<_>>());
        let after = total(&mut g, &unmasked_perturbed.iter().collect::<Vec<_>>());
        ensure(base.to_bits() == after.to_bits(), || {
            format!("trial {trial}: total moved from {base:e} to {after:e}")
        })?;
        let control = total(&mut g, &masked_perturbed.iter().collect::<Vec<_>>());
        if control != base {
            teeth += 1;
        }
    }
    ensure(teeth == 100, || format!("perturbing masked rows changed the loss in only {teeth}/100 trials"))?;
    Ok("100 triples bit-identical; masked-row control moved 100/100".into())
}

fn loss_weighting() -> Check {
    let cfg = TrainConfig::default();
    ensure(cfg.coarse_weight == 1.0 && cfg.fine_weight == 10.0, || "default weights are not 1.0 / 10.0".into())?;
    let target = Matrix::zeros(1, FEATURE_DIM);
    let mut coarse = target.clone();
    coarse.set(0, 5, 1.0);
    let mask = MaskSpec {
        mask_rate: 1.0,
        phone_span: (0, 1),
        frame_ranges: vec![FrameRange::new(0, 1)],
    };
    let v = VarianceValues {
        log_durations: &[0.7],
        phone_f0: &[4.2],
    };
    let l = compute_loss(&coarse, &target, &target, &mask, 0.0, v, v, &cfg).map_err(|e| e.to_string())?;
    let expected = 1.0 * (1.0f64 * 1.0) / 19.0;
    ensure((l.total - expected).abs() <= 1e-9, || format!("total {} vs {expected}", l.total))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 6;
    let rand_m = |rng: &mut ChaCha8Rng| {
        Matrix::from_vec(rows, FEATURE_DIM, (0..rows * FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect())
    };
    let (c, f, t) = (rand_m(&mut rng), rand_m(&mut rng), rand_m(&mut rng));
    let mask = MaskSpec {
        mask_rate: 0.5,
        phone_span: (1, 2),
        frame_ranges: vec![FrameRange::new(2, 5)],
    };
    let doubled = TrainConfig {
        fine_weight: 2.0 * cfg.fine_weight,
        ..cfg.clone()
    };
    let a = compute_loss(&c, &f, &t, &mask, 0.3, v, v, &cfg).map_err(|e| e.to_string())?;
    let b = compute_loss(&c, &f, &t, &mask, 0.3, v, v, &doubled).map_err(|e| e.to_string())?;
    ensure(b.fine == 2.0 * a.fine, || format!("fine {} vs 2x{}", b.fine, a.fine))?;
    ensure(b.coarse == a.coarse, || "doubling fine_weight moved the coarse term".into())?;
    Ok(format!("total {:.9} (expected {expected:.9}); doubled fine term exact", l.total))
}

/// `round(num/den · P)` with halves rounded up, in integers.
fn oracle_span(num: usize, den: usize, p: usize) -> usize {
    ((2 * num * p + den) / (2 * den)).clamp(1, p)
}

fn mask_rate_law() -> Check {
    let rates = [(0.2, 1, 5), (0.5, 1, 2), (1.0, 1, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut cases = 0;
    for p in 1..=50usize {
        for &(rate, num, den) in &rates {
            let want = oracle_span(num, den, p);
            let got = span_length(p, rate);
            ensure(got == want, || format!("P={p} rate={rate}: {got} != {want}"))?;
            for _ in 0..20 {
                let m = sample_mask(p, &mut rng, [rate, rate]);
                let (s, e) = m.phone_span;
                ensure(e - s == want && e <= p, || format!("P={p} rate={rate}: sampled span {s}..{e}"))?;
            }
            cases += 1;
        }
    }

    // Rate 1.0 hides the whole context from the decoder.
    let inventory: Vec<String> = (0..6).map(|i| format!("P{i}")).collect();
    let mut zero_checks = 0;
    for (k, (emb, rm)) in [
        (EmbeddingMode::None, RefMode::None),
        (EmbeddingMode::Utterance, RefMode::Variational),
    ]
    .into_iter()
    .enumerate()
    {
        let ex = random_example(&mut rng, k, inventory.len(), emb != EmbeddingMode::None);
        let model = AcousticModel::new(tiny(emb, rm), inventory.clone(), FeatureNorm::fit([&ex.features]), 3).unwrap();
        let p = PreparedExample::new(&ex, &model).unwrap();
        let m = sample_mask(p.phones.len(), &mut rng, [1.0, 1.0]).with_durations(&p.durations);
        let frames = p.target.rows();
        let mut g = Graph::eval();
        let reference = match model.encode_references(&mut g, &[&p.target]).unwrap() {
            Some(r) => Some(r.encoding),
            None => None,
        };
        let input = UtteranceInput {
            phones: &p.phones,
            phone_masked: &m.phone_flags(p.phones.len()),
            durations: &p.durations,
            phone_f0: &p.f0_targets,
            context: &p.target,
            frame_masked: &m.frame_flags(frames),
            embedding: p.embedding.as_deref(),
        };
        let out = model.forward(&mut g, &input, reference).unwrap();
        let dec = g.value(out.decoder_input);
        let cols = context_columns(&model);
        for t in 0..frames {
            for c in cols.clone() {
                ensure(dec.get(t, c) == 0.0, || format!("context column {c} of frame {t} is {}", dec.get(t, c)))?;
                zero_checks += 1;
            }
        }
    }
    Ok(format!("{cases} (P, rate) cases; {zero_checks} context cells zero at rate 1.0"))
}

fn length_regulator_law() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..1000 {
        let p = rng.gen_range(1..30);
        let dim = rng.gen_range(1..8);
        let per_phone = Matrix::from_vec(p, dim, (0..p * dim).map(|_| rng.gen_range(-10.0..10.0)).collect());
        let mut durations: Vec<usize> = (0..p).map(|_| if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..12) }).collect();
        if durations.iter().all(|&d| d == 0) {
            ensure(length_regulate(&per_phone, &durations).is_err(), || format!("case {case}: all-zero durations accepted"))?;
            durations[0] = 1;
        }
        let out = length_regulate(&per_phone, &durations).map_err(|e| e.to_string())?;
        let mut expected_rows = Vec::new();
        for (i, &d) in durations.iter().enumerate() {
            expected_rows.extend(std::iter::repeat(i).take(d));
        }
        ensure(out.rows() == durations.iter().sum::<usize>(), || format!("case {case}: {} rows", out.rows()))?;
        for (row, &src) in expected_rows.iter().enumerate() {
            for c in 0..dim {
                ensure(out.get(row, c).to_bits() == per_phone.get(src, c).to_bits(), || {
                    format!("case {case}: row {row} col {c} is not a copy of phone {src}")
                })?;
            }
        }
    }
    Ok("1000 duration vectors".into())
}

fn reference_encoder_arithmetic() -> Check {
    let inventory: Vec<String> = (0..4).map(|i| format!("P{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let oracle = |l: usize| {
        let a = (l - 1) / 2 + 1;
        let b = (a - 1) / 2 + 1;
        [a, b, (b - 1) / 2 + 1]
    };
    ensure(oracle(100) == [50, 25, 13], || "oracle disagrees with 100 -> 50 -> 25 -> 13".into())?;
    ensure(ReferenceEncoder::internal_lengths(100) == [50, 25, 13], || {
        format!("internal lengths {:?}", ReferenceEncoder::internal_lengths(100))
    })?;
    for rm in [RefMode::Standard, RefMode::Variational] {
        let model = AcousticModel::new(tiny(EmbeddingMode::None, rm), inventory.clone(), FeatureNorm::default(), 1).unwrap();
        let lengths: Vec<usize> = std::iter::once(100).chain((0..20).map(|_| rng.gen_range(1..300))).collect();
        let mats: Vec<Matrix> = lengths
            .iter()
            .map(|&l| Matrix::from_vec(l, FEATURE_DIM, (0..l * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        for train in [false, true] {
            let mut g = if train { Graph::train(ChaCha8Rng::seed_from_u64(2)) } else { Graph::eval() };
            let out = model
                .encode_references(&mut g, &mats.iter().collect::<Vec<_>>())
                .unwrap()
                .expect("reference encoder present");
            ensure(g.value(out.encoding).shape() == (lengths.len(), 32), || {
                format!("{rm:?}: encoding shape {:?}", g.value(out.encoding).shape())
            })?;
            for (l, got) in lengths.iter().zip(&out.conv_lengths) {
                ensure(*got == oracle(*l), || format!("{rm:?} T={l}: {got:?} vs {:?}", oracle(*l)))?;
            }
        }
    }

    let mu: Vec<f64> = (0..32).map(|i| (i as f64 - 15.5) / 10.0).collect();
    let sigma: Vec<f64> = (0..32).map(|i| 0.3 + 0.05 * i as f64).collect();
    let hand: f64 = mu
        .iter()
        .zip(&sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 2.0 * s.ln() - 1.0))
        .sum();
    let logvar: Vec<f64> = sigma.iter().map(|s| 2.0 * s.ln()).collect();
    let mut g = Graph::eval();
    let mv = g.input(Matrix::from_vec(1, 32, mu.clone()));
    let lv = g.input(Matrix::from_vec(1, 32, logvar.clone()));
    let kl = kl_term(&mut g, mv, lv);
    let graph_kl = g.value(kl).get(0, 0);
    ensure((graph_kl - hand).abs() <= 1e-6, || format!("graph KL {graph_kl} vs {hand}"))?;
    ensure((kl_closed_form(&mu, &sigma) - hand).abs() <= 1e-6, || "closed form disagrees".into())?;

    let grads = g.backward(kl);
    let (gm, gl) = (grads.get(mv).unwrap().clone(), grads.get(lv).unwrap().clone());
    let eval = |mu: &[f64], lv: &[f64]| {
        let mut g = Graph::eval();
        let a = g.constant(Matrix::from_vec(1, 32, mu.to_vec()));
        let b = g.constant(Matrix::from_vec(1, 32, lv.to_vec()));
        let k = kl_term(&mut g, a, b);
        g.value(k).get(0, 0)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..32 {
        for (which, analytic) in [(0, gm.get(0, i)), (1, gl.get(0, i))] {
            let (mut a, mut b) = (mu.clone(), logvar.clone());
            let (mut c, mut d) = (mu.clone(), logvar.clone());
            if which == 0 {
                a[i] += h;
                c[i] -= h;
            } else {
                b[i] += h;
                d[i] -= h;
            }
            let fd = (eval(&a, &b) - eval(&c, &d)) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-3, || format!("worst relative gradient error {worst:e}"))?;
    Ok(format!("lengths exact for 42 inputs; KL err {:.1e}; grad rel err {worst:.1e}", (graph_kl - hand).abs()))
}

fn speaker_mean() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..25);
        let utts: Vec<Embedding> = (0..n)
            .map(|_| Embedding::new((0..32).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap())
            .collect();
        let got = speaker_embedding(&utts).map_err(|e| e.to_string())?;
        for d in 0..32 {
            let mean = utts.iter().map(|u| u.as_slice()[d] as f64).sum::<f64>() / n as f64;
            worst = worst.max((got.as_slice()[d] as f64 - mean).abs());
        }
        let mut shuffled = utts.clone();
        shuffled.shuffle(&mut rng);
        let again = speaker_embedding(&shuffled).unwrap();
        ensure(
            got.as_slice().iter().zip(again.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || "result depends on utterance order".into(),
        )?;
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 speakers; max deviation {worst:.1e}; order-invariant"))
}

struct Overfit {
    corpus: Corpus,
    state: TrainState,
    cfg: TrainConfig,
}

fn overfit_setup(dir: &Path) -> Result<(Corpus, TrainingExample), String> {
    let files = toy::write_toy_corpus(
        &dir.join("src"),
        &toy::ToyCorpusConfig {
            speakers: 1,
            utterances_per_speaker: 1,
            seed: 0,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let data = dir.join("data");
    let report = prepare_data(&files.manifest, &files.lexicon, &data, &FrameSpec::default(), &FallbackProvider::default())
        .map_err(|e| e.to_string())?;
    ensure(report.summary.failures.is_empty(), || format!("{:?}", report.summary.failures))?;
    let corpus = Corpus::open(&data).map_err(|e| e.to_string())?;
    let ex = corpus
        .training_examples(EmbeddingMode::None, None)
        .map_err(|e| e.to_string())?
        .remove(0);
    Ok((corpus, ex))
}

fn overfit_model(corpus: &Corpus, ex: &TrainingExample) -> AcousticModel {
    let cfg = ModelConfig {
        hidden: 64,
        ffn_dim: 128,
        encoder_blocks: 2,
        coarse_blocks: 2,
        fine_blocks: 2,
        ..Default::default()
    };
    AcousticModel::new(cfg, corpus.lexicon.inventory().to_vec(), FeatureNorm::fit([&ex.features]), 0).unwrap()
}

fn overfit_train_cfg() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        batch_size: 1,
        warmup_steps: 100,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

fn run_steps(state: &mut TrainState, ex: &PreparedExample, cfg: &TrainConfig, until: u64) -> Result<(), String> {
    while state.step < until {
        train_step(state, &[ex], cfg).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn overfit_smoke(dir: &Path, keep: &mut Option<Overfit>) -> Check {
    let start = Instant::now();
    let (corpus, ex) = overfit_setup(dir)?;
    let cfg = overfit_train_cfg();
    let model = overfit_model(&corpus, &ex);
    let prepared = PreparedExample::new(&ex, &model).map_err(|e| e.to_string())?;
    let mut mrng = ChaCha8Rng::seed_from_u64(99);
    let masks: Vec<MaskSpec> = (0..8)
        .map(|_| sample_mask(prepared.phones.len(), &mut mrng, cfg.mask_rate_range).with_durations(&prepared.durations))
        .collect();
    let batch = vec![&prepared; masks.len()];
    let fine_mse = |m: &AcousticModel| -> Result<f64, String> {
        Ok(evaluate_loss(m, &batch, &masks, &cfg).map_err(|e| e.to_string())?.fine / cfg.fine_weight)
    };

    // Determinism: two independent 20-step runs from the same seed.
    let mut digests = Vec::new();
    for _ in 0..2 {
        let mut s = TrainState::new(overfit_model(&corpus, &ex), &cfg);
        run_steps(&mut s, &prepared, &cfg, 20)?;
        digests.push(write_checkpoint(&Checkpoint::from_state(&s, &cfg)).map_err(|e| e.to_string())?);
    }
    ensure(digests[0] == digests[1], || "two runs with the same seed differ".into())?;

    let mut state = TrainState::new(model, &cfg);
    let initial = fine_mse(&state.model)?;
    let mut reached = None;
    let mut last = initial;
    while state.step < cfg.steps {
        let next = state.step + 50;
        run_steps(&mut state, &prepared, &cfg, next)?;
        last = fine_mse(&state.model)?;
        if last < 0.1 * initial {
            reached = Some(state.step);
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let frames = prepared.target.rows();
    let phones = prepared.phones.len();
    *keep = Some(Overfit { corpus, state, cfg });
    let step = reached.ok_or_else(|| format!("masked fine MSE {last:.4} still above 10% of {initial:.4} after 2000 steps"))?;
    ensure(secs <= 900.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "{frames} frames, {phones} phones: masked fine MSE {initial:.4} -> {last:.4} ({:.1}%) at step {step}; {secs:.0} s; seeded runs identical",
        100.0 * last / initial
    ))
}

fn edit_identity(overfit: &mut Option<Overfit>) -> Check {
    let o = overfit.as_mut().ok_or("overfit model unavailable")?;
    // Train the same state further so the model reconstructs its utterance.
    let ex = o
        .corpus
        .training_examples(EmbeddingMode::None, None)
        .map_err(|e| e.to_string())?
        .remove(0);
    let prepared = PreparedExample::new(&ex, &o.state.model).map_err(|e| e.to_string())?;
    run_steps(&mut o.state, &prepared, &o.cfg, 600)?;
    let model = &o.state.model;
    let corpus = &o.corpus;
    let id = corpus.records[0].id.clone();
    let source = corpus.edit_source(&id).map_err(|e| e.to_string())?;
    let provider = FallbackProvider::default();
    let spec = corpus.spec();
    let ctx = EditContext {
        lexicon: &corpus.lexicon,
        provider: &provider,
        vocoder: None,
        spec,
        attach_metrics: true,
    };
    let vocoded = BaselineVocoder { seed: 4 }.synthesize(&source.features, &spec).unwrap();

    let mut noop = EditRequest::new(id.clone(), [1, 1], "");
    noop.seed = 4;
    let r = edit(&noop, model, &source, &ctx).map_err(|e| e.to_string())?;
    ensure(
        r.audio.samples.len() == vocoded.samples.len()
            && r.audio.samples.iter().zip(&vocoded.samples).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "no-op edit differs from the vocoded original".into(),
    )?;

    let words = &source.phones.words;
    let (i, j) = (1, (3).min(words.len()));
    let mut self_edit = EditRequest::new(id.clone(), [i, j], words[i..j].join(" "));
    self_edit.seed = 4;
    self_edit.force_durations = true;
    let r = edit(&self_edit, model, &source, &ctx).map_err(|e| e.to_string())?;
    ensure(r.audio.len() == vocoded.len(), || "forced durations changed the length".into())?;
    let (a, b) = r.boundaries_samples;
    let margin = boundary_margin(spec.sample_rate);
    let clamp = |s: usize| s.clamp(margin, vocoded.len() - margin);
    let edited = boundary_discontinuity(&r.audio, &[clamp(a), clamp(b)]).map_err(|e| e.to_string())?;
    let baseline = boundary_discontinuity(&vocoded, &[clamp(a), clamp(b)]).map_err(|e| e.to_string())?;
    let fade = r.fade_samples;
    let outside = (0..a - fade).chain(b + fade..vocoded.len());
    let mut local = true;
    for s in outside {
        if r.audio.samples[s].to_bits() != vocoded.samples[s].to_bits() {
            local = false;
            break;
        }
    }
    ensure(local, || "samples outside the fade windows changed".into())?;
    ensure(edited <= 2.0 * baseline, || {
        format!("boundary score {edited:.4} > 2 x baseline {baseline:.4} (words {i}..{j})")
    })?;
    Ok(format!(
        "no-op bit-exact; self-edit of words {i}..{j}: boundary {edited:.4} vs baseline {baseline:.4} ({:.2}x); locality holds",
        edited / baseline
    ))
}

fn crossfade_unity() -> Check {
    let mut worst: f64 = 0.0;
    for shape in [FadeShape::Linear, FadeShape::RaisedCosine] {
        for fade in [1usize, 2, 7, 80, 160, 401] {
            let len = 4 * fade + 50;
            let ones = AudioClip::new(vec![1.0; len], 16000).unwrap();
            let region = AudioClip::new(vec![1.0; 2 * fade + 10], 16000).unwrap();
            let (a, b) = (fade + 3, fade + 13);
            let out = splice_samples(&ones, &region, (a, b), fade, shape).map_err(|e| e.to_string())?;
            for &s in &out.samples {
                worst = worst.max((s as f64 - 1.0).abs());
            }
            for k in 0..fade {
                let g = shape.gain(k, fade);
                worst = worst.max((g + (1.0 - g) - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-7, || format!("gain sum deviates by {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut resplice: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(200..4000);
        let clip = AudioClip::new((0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 16000).unwrap();
        let a = rng.gen_range(0..len);
        let b = rng.gen_range(a..=len);
        let fade = rng.gen_range(0..=a.min(len - b).min(160));
        let region = AudioClip::new(clip.samples[a - fade..b + fade].to_vec(), 16000).unwrap();
        let shape = if rng.gen_bool(0.5) { FadeShape::Linear } else { FadeShape::RaisedCosine };
        let out = splice_samples(&clip, &region, (a, b), fade, shape).map_err(|e| e.to_string())?;
        ensure(out.len() == len, || "resplice changed the length".into())?;
        for (x, y) in out.samples.iter().zip(&clip.samples) {
            resplice = resplice.max((x - y).abs() as f64);
        }
    }
    ensure(resplice <= 1e-6, || format!("resplice deviates by {resplice:e}"))?;
    Ok(format!("gain error {worst:.1e}; resplice error {resplice:.1e} over 200 cuts"))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let frames = 40;
    let data: Vec<f32> = (0..frames * FEATURE_DIM)
        .map(|i| match i % FEATURE_DIM {
            0 => rng.gen_range(0i32..2000) as f32 / 8.0,
            c if c >= 14 => rng.gen_range(0i32..8) as f32 / 8.0,
            _ => rng.gen_range(-64i32..64) as f32 / 8.0,
        })
        .collect();
    let reference = VocoderFeatures::from_frames(data).unwrap();
    let mut pred = reference.clone();
    for t in 0..frames {
        for c in 2..14 {
            pred.frame_mut(t)[c] += 1.0;
        }
        pred.frame_mut(t)[1] += 9.0;
    }
    let expected = 10.0 / std::f64::consts::LN_10 * (2.0f64 * 12.0).sqrt();
    let got = mcd(&pred, &reference).map_err(|e| e.to_string())?;
    ensure((got - expected).abs() <= 1e-6, || format!("MCD {got} vs {expected}"))?;
    ensure((got - 21.28).abs() < 0.005, || format!("MCD {got} does not round to 21.28"))?;
    ensure(mcd(&reference, &reference).unwrap() == 0.0, || "MCD of identical inputs is not 0".into())?;

    let c = cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
    let c_expected = 32.0 / (14.0f64 * 77.0).sqrt();
    ensure((c - c_expected).abs() <= 1e-9, || format!("cosine {c} vs {c_expected}"))?;
    ensure((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() <= 1e-9, || "orthogonal cosine not 0".into())?;
    ensure((cosine(&[1.0, -1.0], &[-3.0, 3.0]) + 1.0).abs() <= 1e-9, || "opposite cosine not -1".into())?;

    let f0 = |v: &[f32]| {
        let mut f = VocoderFeatures::zeros(v.len());
        for (t, &x) in v.iter().enumerate() {
            f.frame_mut(t)[0] = x;
        }
        f
    };
    let (rmse, vuv) = f0_rmse_and_vuv(&f0(&[103.0, 196.0, 0.0, 0.0]), &f0(&[100.0, 200.0, 0.0, 150.0])).unwrap();
    let rmse = rmse.ok_or("no voiced frames")?;
    ensure((rmse - 12.5f64.sqrt()).abs() <= 1e-9, || format!("f0 RMSE {rmse}"))?;
    ensure((vuv - 0.25).abs() <= 1e-9, || format!("V/UV error {vuv}"))?;
    Ok(format!("MCD {got:.6} dB (expected {expected:.6}); cosine and f0 hand cases exact"))
}

fn http(port: u16, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(120))).unwrap();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    s.write_all(head.as_bytes()).unwrap();
    s.write_all(body).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("response head");
    let status = String::from_utf8_lossy(&raw[..split]).split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, raw[split + 4..].to_vec())
}

fn http_json(port: u16, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let bytes = body.map(|b| serde_json::to_vec(b).unwrap()).unwrap_or_default();
    let (status, resp) = http(port, method, path, &bytes);
    (status, serde_json::from_slice(&resp).unwrap_or(Value::Null))
}

const JOB_ORDER: [&str; 4] = ["queued", "running", "done", "failed"];

fn rank(state: &str) -> usize {
    JOB_ORDER.iter().position(|s| *s == state).map_or(usize::MAX, |r| r.min(2))
}

fn service_lifecycle(dir: &Path) -> Check {
    std::fs::write(dir.join("lexicon.txt"), toy::lexicon_text()).unwrap();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let port = listener.local_addr().unwrap().port();
    let config = ServiceConfig {
        data_dir: dir.to_path_buf(),
        port,
        workers: 2,
        lexicon: None,
    };
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(tbve_service::serve_on(listener, config, async {
        let _ = stop_rx.await;
    }));
    let deadline = Instant::now() + Duration::from_secs(30);
    while TcpStream::connect(("127.0.0.1", port)).is_err() || http_json(port, "GET", "/v1/health", None).0 != 200 {
        ensure(Instant::now() < deadline, || "service never became healthy".into())?;
        std::thread::sleep(Duration::from_millis(20));
    }

    let u = &toy::generate(&toy::ToyCorpusConfig {
        speakers: 1,
        utterances_per_speaker: 1,
        min_words: 4,
        max_words: 4,
        seed: 8,
    })
    .unwrap()[0];
    let spec = FrameSpec::default();
    let audio = toy::render(&u.features, &spec, 0).unwrap();
    let wav = audio.to_wav_bytes().unwrap();
    let upload = json!({
        "id": "rec",
        "speaker_id": u.record.speaker_id,
        "transcript": u.record.text,
        "phones": u.record.phones,
        "durations_frames": u.record.durations_frames,
        "audio_wav_base64": base64::engine::general_purpose::STANDARD.encode(&wav),
    });
    let (status, v) = http_json(port, "POST", "/v1/recordings", Some(&upload));
    ensure(status == 201, || format!("upload returned {status}: {v}"))?;
    let (status, stored) = http(port, "GET", "/v1/recordings/rec/audio", &[]);
    ensure(status == 200 && stored == wav, || "stored audio is not byte-exact".into())?;

    let lex = tbve_core::frontend::Lexicon::parse(&toy::lexicon_text()).unwrap();
    let feats = tbve_core::features::extract_features(&audio, &spec).unwrap();
    let model = AcousticModel::new(
        ModelConfig {
            hidden: 32,
            ffn_dim: 64,
            encoder_blocks: 1,
            coarse_blocks: 1,
            fine_blocks: 1,
            embedding_mode: EmbeddingMode::Utterance,
            ref_mode: RefMode::Standard,
            ..Default::default()
        },
        lex.inventory().to_vec(),
        FeatureNorm::fit([&feats]),
        6,
    )
    .unwrap();
    let tc = TrainConfig::default();
    let ck = write_checkpoint(&Checkpoint::from_state(&TrainState::new(model, &tc), &tc)).unwrap();
    let (status, body) = http(port, "POST", "/v1/checkpoints", &ck);
    ensure(status == 201, || format!("checkpoint upload returned {status}"))?;
    let ck_id = serde_json::from_slice::<Value>(&body).unwrap()["id"].as_str().unwrap().to_string();
    let (status, _) = http_json(port, "POST", &format!("/v1/checkpoints/{ck_id}/activate"), None);
    ensure(status == 200, || "activation failed".into())?;

    let words = u.record.text.split_whitespace().count();
    let mut jobs = Vec::new();
    for k in 0..8u64 {
        let (status, v) = if k == 7 {
            http_json(port, "POST", "/v1/synthesize", Some(&json!({"text": "GREEN MOON", "reference_recording_id": "rec", "seed": k})))
        } else {
            let span = [(k as usize) % words, (k as usize) % words + 1];
            http_json(port, "POST", "/v1/edits", Some(&json!({
                "utterance_id": "rec", "word_span": span, "replacement_text": "RED SEA", "seed": k
            })))
        };
        ensure(status == 202, || format!("submission returned {status}: {v}"))?;
        jobs.push(v["id"].as_str().unwrap().to_string());
    }

    let mut last_rank = vec![0usize; jobs.len()];
    let mut transitions = 0;
    let deadline = Instant::now() + Duration::from_secs(300);
    loop {
        let mut all_done = true;
        for (k, id) in jobs.iter().enumerate() {
            let (status, v) = http_json(port, "GET", &format!("/v1/jobs/{id}"), None);
            ensure(status == 200, || format!("job lookup returned {status}"))?;
            let state = v["state"].as_str().unwrap_or("?").to_string();
            ensure(state != "failed", || format!("job {id} failed: {}", v["error"]))?;
            let r = rank(&state);
            ensure(r != usize::MAX, || format!("unknown state {state}"))?;
            ensure(r >= last_rank[k], || format!("job {id} regressed to {state}"))?;
            if r > last_rank[k] {
                transitions += 1;
            }
            last_rank[k] = r;
            all_done &= state == "done";
        }
        if all_done {
            break;
        }
        ensure(Instant::now() < deadline, || "jobs did not finish".into())?;
        std::thread::sleep(Duration::from_millis(10));
    }
    for id in &jobs {
        let (status, bytes) = http(port, "GET", &format!("/v1/jobs/{id}/audio"), &[]);
        ensure(status == 200, || format!("audio for {id} returned {status}"))?;
        let clip = AudioClip::from_wav_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(!clip.is_empty() && clip.samples.iter().all(|s| s.is_finite()), || format!("bad audio for {id}"))?;
    }
    let _ = stop_tx.send(());
    runtime
        .block_on(server)
        .map_err(|e| e.to_string())?
        .map_err(|e| e.message)?;
    Ok(format!("{} jobs (7 edits, 1 synthesis) on 2 workers; {transitions} forward transitions, none backwards", jobs.len()))
}

fn conditioning_matrix(dir: &Path) -> Check {
    let files = toy::write_toy_corpus(
        &dir.join("src"),
        &toy::ToyCorpusConfig {
            speakers: 2,
            utterances_per_speaker: 2,
            seed: 3,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let data = dir.join("data");
    prepare_data(&files.manifest, &files.lexicon, &data, &FrameSpec::default(), &FallbackProvider::default())
        .map_err(|e| e.to_string())?;
    let corpus = Corpus::open(&data).map_err(|e| e.to_string())?;
    let provider = FallbackProvider::default();
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 2,
        warmup_steps: 10,
        checkpoint_every: 0,
        ..Default::default()
    };
    let mut done = Vec::new();
    for emb in EmbeddingMode::ALL {
        for rm in RefMode::ALL {
            let tag = format!("{}/{:?}", emb.as_str(), rm);
            let examples = corpus.training_examples(emb, None).map_err(|e| format!("{tag}: {e}"))?;
            let norm = FeatureNorm::fit(examples.iter().map(|e| &e.features));
            let model = AcousticModel::new(tiny(emb, rm), corpus.lexicon.inventory().to_vec(), norm, 5)
                .map_err(|e| format!("{tag}: {e}"))?;
            let mut state = TrainState::new(model, &cfg);
            let reports = tbve_core::training::train(&mut state, &examples, &cfg, None, |_| true)
                .map_err(|e| format!("{tag}: {e}"))?;
            ensure(reports.len() == 50 && reports.iter().all(|r| r.loss.total.is_finite()), || {
                format!("{tag}: training did not produce 50 finite steps")
            })?;
            let id = &corpus.records[0].id;
            let source = corpus.edit_source(id).map_err(|e| format!("{tag}: {e}"))?;
            let ctx = EditContext {
                lexicon: &corpus.lexicon,
                provider: &provider,
                vocoder: None,
                spec: corpus.spec(),
                attach_metrics: true,
            };
            let r = edit(&EditRequest::new(id.clone(), [0, 1], "GREEN"), &state.model, &source, &ctx)
                .map_err(|e| format!("{tag}: edit failed: {e}"))?;
            ensure(r.audio.samples.iter().all(|s| s.is_finite()) && r.metrics.is_some(), || {
                format!("{tag}: edit output is not usable")
            })?;
            done.push(tag);
        }
    }
    Ok(format!("{} variants trained 50 steps and edited", done.len()))
}

// ------------------------------------------------------------------ runner

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let root = tempfile::tempdir().expect("temp dir");
    let mut overfit: Option<Overfit> = None;
    let mut results: Vec<(&str, bool)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail, ok) = match outcome {
            Ok(d) => ("PASS", d, true),
            Err(d) => ("FAIL", d, false),
        };
        println!("{tag}  {name:<30} {secs:>7.2}s  {detail}");
        results.push((name, ok));
    };
    let sub = |name: &str| {
        let d = root.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };

    run("masked-loss isolation", &mut masked_loss_isolation);
    run("loss weighting", &mut loss_weighting);
    run("mask-rate law", &mut mask_rate_law);
    run("length-regulator law", &mut length_regulator_law);
    run("reference-encoder arithmetic", &mut reference_encoder_arithmetic);
    run("speaker-embedding mean", &mut speaker_mean);
    let d = sub("overfit");
    run("overfit smoke training", &mut || overfit_smoke(&d, &mut overfit));
    run("edit pipeline identity", &mut || edit_identity(&mut overfit));
    run("crossfade unity gain", &mut crossfade_unity);
    run("metric oracles", &mut metric_oracles);
    let d = sub("service");
    run("service lifecycle", &mut || service_lifecycle(&d));
    let d = sub("matrix");
    run("conditioning matrix", &mut || conditioning_matrix(&d));

    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
