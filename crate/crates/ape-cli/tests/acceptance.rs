//! Release gate: one test per shipped guarantee, numbered c01-c12. Each
//! test checks its guarantee against an independent oracle — closed forms,
//! exhaustive enumeration, finite differences, or hand-worked examples —
//! and the harness line for the test is the pass/fail verdict.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ape_core::checkpoint;
use ape_core::data::{batch_by_tokens, encode_corpus, Batch, Triplet};
use ape_core::decoding::{beam_search, translate_corpus, BeamConfig};
use ape_core::fixture;
use ape_core::metrics::{bleu, bleu_corpus, score_corpus, ter, ter_counts};
use ape_core::model::{ModelConfig, SharingConfig, SharingPreset};
use ape_core::tensor::tape::Tape;
use ape_core::testing::{exhaustive_best_decode, exhaustive_ter_edits, grad_rel_err};
use ape_core::tokenizer::{encode_pair, Segment, Vocab, RESERVED};
use ape_core::training::{train, Ema, TrainConfig, TrainEvent};
use ape_core::{Model32, Model64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough to brute-force, deep enough to be structurally honest:
/// two layers, width 8, two heads.
fn small_cfg(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden: 8,
        layers: 2,
        heads: 2,
        feed_forward: 16,
        max_positions: 32,
        dropout: 0.0,
        attn_dropout: 0.0,
        layer_norm_eps: 1e-12,
        init_std: 0.02,
    }
}

/// The five reserved tokens plus `n_words` plain words.
fn words_vocab(n_words: usize) -> Vocab {
    let mut lines: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    lines.extend((0..n_words).map(|i| format!("w{i}")));
    Vocab::from_lines(lines).expect("test vocabulary is well formed")
}

fn bits32(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Closed-form learnable-parameter count for a configuration: tied tensors
/// count once, norms and biases included, no output bias.
fn expected_params(cfg: &ModelConfig, s: &SharingConfig) -> usize {
    let (h, f, l) = (cfg.hidden, cfg.feed_forward, cfg.layers);
    let attn = 4 * (h * h + h);
    let ff = h * f + f + f * h + h;
    let norm = 2 * h;
    let embeddings = cfg.vocab_size * h + cfg.max_positions * h + 2 * h + norm;
    let encoder = l * (attn + norm + ff + norm);
    let dec_self = if s.share_self_attn { 0 } else { attn };
    let dec_ctx = if s.share_context_attn { 0 } else { attn };
    let dec_ff = if s.share_feed_forward { 0 } else { ff };
    let decoder = l * (dec_self + norm + dec_ctx + norm + dec_ff + norm);
    embeddings + encoder + decoder
}

fn normalize_groups(mut groups: Vec<Vec<String>>) -> Vec<Vec<String>> {
    for g in &mut groups {
        g.sort();
    }
    groups.sort();
    groups
}

/// Every tie group a sharing configuration promises: the always-present
/// embedding/projection ties plus the per-layer attention and feed-forward
/// ties the flags switch on.
fn expected_tie_groups(s: &SharingConfig, layers: usize) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = vec![
        vec![
            "embeddings.word".into(),
            "decoder.embeddings.word".into(),
            "output.weight".into(),
        ],
        vec!["embeddings.position".into(), "decoder.embeddings.position".into()],
        vec!["embeddings.segment".into(), "decoder.embeddings.segment".into()],
        vec!["embeddings.norm.gain".into(), "decoder.embeddings.norm.gain".into()],
        vec!["embeddings.norm.bias".into(), "decoder.embeddings.norm.bias".into()],
    ];
    for i in 0..layers {
        for proj in ["q", "k", "v", "out"] {
            for leaf in ["weight", "bias"] {
                let mut g = vec![format!("encoder.{i}.attn.{proj}.{leaf}")];
                if s.share_self_attn {
                    g.push(format!("decoder.{i}.self_attn.{proj}.{leaf}"));
                }
                if s.share_context_attn {
                    g.push(format!("decoder.{i}.context_attn.{proj}.{leaf}"));
                }
                if g.len() > 1 {
                    groups.push(g);
                }
            }
        }
        if s.share_feed_forward {
            for part in ["inner", "outer"] {
                for leaf in ["weight", "bias"] {
                    groups.push(vec![
                        format!("encoder.{i}.ff.{part}.{leaf}"),
                        format!("decoder.{i}.ff.{part}.{leaf}"),
                    ]);
                }
            }
        }
    }
    normalize_groups(groups)
}

#[test]
fn c01_full_scale_training_is_out_of_reach_so_behavior_is_checked_at_desk_scale() {
    // The full-size configuration is real and valid, but training it is a
    // cluster-scale job, so its published-quality scores cannot be asserted
    // here. This gate instead proves the machinery — gradients, tying,
    // masking, decoding, scoring, scheduling, persistence — on models small
    // enough to compare against exhaustive oracles (c02 through c12).
    let base = ModelConfig::base(30_522);
    base.validate().expect("full-size configuration must be valid");
    let full = expected_params(&base, &SharingPreset::Transformer.config());
    assert!(full > 100_000_000, "full-size editor has {full} parameters");

    // The counting formula itself is anchored to the real store.
    let vocab = fixture::vocab();
    let sharing = SharingPreset::Transformer.config();
    let model = Model32::build(small_cfg(vocab.len()), sharing, 1).unwrap();
    assert_eq!(
        model.store().count_parameters(),
        expected_params(&small_cfg(vocab.len()), &sharing)
    );
    println!(
        "criterion 1: full-scale scores (a {full}-parameter, cluster-scale run) are not asserted; \
         the same machinery is verified at desk scale by criteria 2-12"
    );
}

fn eval_loss(model: &Model64, batch: &Batch, pad: usize) -> f64 {
    let mut tape = Tape::new();
    let p = model.params_on_tape(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mean, _) = model
        .batch_loss_on_tape(&mut tape, &p, batch, 0.1, pad, false, &mut rng)
        .expect("forward pass");
    tape.value(mean)[0]
}

#[test]
fn c02_backprop_matches_finite_differences_on_every_parameter_tensor() {
    let started = Instant::now();
    let vocab = words_vocab(15);
    assert_eq!(vocab.len(), 20);
    let mut model = Model64::build(small_cfg(vocab.len()), SharingPreset::TiedContext.config(), 7).unwrap();
    let triplets = vec![
        Triplet {
            src: "w0 w1 w2".into(),
            mt: "w3 w4".into(),
            pe: "w3 w5 w4".into(),
        },
        Triplet {
            src: "w6 w7".into(),
            mt: "w8 w9 w10".into(),
            pe: "w8 w9".into(),
        },
    ];
    let examples = encode_corpus(&triplets, &vocab, 32).unwrap();
    let batches = batch_by_tokens(&examples, 64, 0, &vocab).unwrap();
    assert_eq!(batches.len(), 1, "both rows must share one batch");
    let batch = &batches[0];
    let pad = vocab.pad_id();

    // Analytic gradients from one taped pass over the same eval-mode loss
    // the finite differences will probe.
    let mut tape = Tape::new();
    let p = model.params_on_tape(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mean, _) = model
        .batch_loss_on_tape(&mut tape, &p, batch, 0.1, pad, false, &mut rng)
        .unwrap();
    tape.backward(mean).unwrap();
    let analytic: Vec<Vec<f64>> = (0..model.store().num_slots())
        .map(|i| {
            tape.grad(p.var(i))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.store().slot(i).numel()])
        })
        .collect();
    drop(tape);

    let names: Vec<String> = model
        .store()
        .canonical_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    // Step size balances truncation against roundoff: the loss is ~3 and
    // attention-key gradients run as small as 1e-6, so 1e-5 steps leave
    // subtraction noise at the tolerance; 1e-4 keeps both error terms small.
    let h = 1e-4;
    for i in 0..model.store().num_slots() {
        let n = model.store().slot(i).numel();
        let mut fd = vec![0.0; n];
        for j in 0..n {
            let orig = model.store().slot(i).data()[j];
            model.store_mut().slot_mut(i).data_mut()[j] = orig + h;
            let up = eval_loss(&model, batch, pad);
            model.store_mut().slot_mut(i).data_mut()[j] = orig - h;
            let down = eval_loss(&model, batch, pad);
            model.store_mut().slot_mut(i).data_mut()[j] = orig;
            fd[j] = (up - down) / (2.0 * h);
        }
        let err = grad_rel_err(&analytic[i], &fd);
        // Key biases shift every logit of a softmax row equally, so their
        // true gradient is identically zero; both sides then hold nothing
        // but roundoff and only an absolute floor is meaningful.
        let l2 = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let both_zero = l2(&analytic[i]) < 1e-9 && l2(&fd) < 1e-9;
        assert!(
            err < 1e-4 || both_zero,
            "{}: relative gradient error {err:.3e} (analytic norm {:.3e}, fd norm {:.3e})",
            names[i],
            l2(&analytic[i]),
            l2(&fd)
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient check took {secs:.1}s, budget 60s");
    println!(
        "criterion 2: all {} parameter tensors within 1e-4 of central differences ({secs:.1}s)",
        model.store().num_slots()
    );
}

#[test]
fn c03_sharing_presets_tie_exactly_the_advertised_tensors() {
    let started = Instant::now();
    let vocab = fixture::vocab();
    let corpus = fixture::copy_edit_corpus(16, 3);
    let examples = encode_corpus(&corpus, &vocab, 32).unwrap();
    let train_cfg = TrainConfig {
        max_steps: 100,
        warmup_steps: 10,
        peak_lr: 1e-3,
        batch_tokens: 128,
        eval_interval: 10_000,
        seed: 5,
        ..TrainConfig::default()
    };
    for preset in SharingPreset::ALL {
        let sharing = preset.config();
        let cfg = small_cfg(vocab.len());
        let mut model = Model32::build(cfg.clone(), sharing, 21).unwrap();

        let got = normalize_groups(model.store().tie_groups());
        assert_eq!(got, expected_tie_groups(&sharing, cfg.layers), "{} tie groups", preset.name());
        assert_eq!(
            model.store().count_parameters(),
            expected_params(&cfg, &sharing),
            "{} learnable parameters",
            preset.name()
        );

        // The embedding and output-projection ties hold under every preset.
        let store = model.store();
        let word = store.slot_of("embeddings.word").unwrap();
        assert_eq!(word, store.slot_of("decoder.embeddings.word").unwrap());
        assert_eq!(word, store.slot_of("output.weight").unwrap());

        // A hundred real optimizer updates keep every group bitwise uniform.
        train(&mut model, &examples, &[], &vocab, &train_cfg, &mut |_| Ok(())).unwrap();
        for group in model.store().tie_groups() {
            let first = bits32(model.store().get(&group[0]).unwrap().data());
            for name in &group[1..] {
                assert!(
                    first == bits32(model.store().get(name).unwrap().data()),
                    "{}: {name} diverged from {} after 100 updates",
                    preset.name(),
                    group[0]
                );
            }
        }

        // Ties are shared storage, not lockstep copies: a poke through the
        // encoder name is visible through the decoder name exactly when the
        // preset shares it.
        let enc_q = model.store().slot_of("encoder.0.attn.q.weight").unwrap();
        let dec_q = model.store().slot_of("decoder.0.self_attn.q.weight").unwrap();
        let ctx_q = model.store().slot_of("decoder.0.context_attn.q.weight").unwrap();
        let enc_ff = model.store().slot_of("encoder.0.ff.inner.weight").unwrap();
        let dec_ff = model.store().slot_of("decoder.0.ff.inner.weight").unwrap();
        model.store_mut().slot_mut(enc_q).data_mut()[0] = 123.5;
        let seen = model.store().get("decoder.0.self_attn.q.weight").unwrap().data()[0];
        if sharing.share_self_attn {
            assert_eq!(enc_q, dec_q, "{}", preset.name());
            assert_eq!(seen, 123.5, "{}: tied self-attention must alias", preset.name());
        } else {
            assert_ne!(enc_q, dec_q, "{}", preset.name());
            assert_ne!(seen, 123.5, "{}: untied self-attention must not alias", preset.name());
        }
        if sharing.share_context_attn {
            assert_eq!(dec_q, ctx_q, "{}", preset.name());
        } else {
            assert_ne!(dec_q, ctx_q, "{}", preset.name());
        }
        if sharing.share_feed_forward {
            assert_eq!(enc_ff, dec_ff, "{}", preset.name());
        } else {
            assert_ne!(enc_ff, dec_ff, "{}", preset.name());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "tie-topology check took {secs:.1}s, budget 120s");
    println!(
        "criterion 3: 6 presets tie exactly the advertised tensors and stay bitwise uniform over 100 updates ({secs:.1}s)"
    );
}

#[test]
fn c04_context_attention_starts_from_self_attention_and_diverges_unless_tied() {
    let vocab = fixture::vocab();
    let corpus = fixture::copy_edit_corpus(16, 3);
    let examples = encode_corpus(&corpus, &vocab, 32).unwrap();
    let layer_pairs = |i: usize| -> Vec<(String, String)> {
        let mut out = Vec::new();
        for proj in ["q", "k", "v", "out"] {
            for leaf in ["weight", "bias"] {
                out.push((
                    format!("decoder.{i}.self_attn.{proj}.{leaf}"),
                    format!("decoder.{i}.context_attn.{proj}.{leaf}"),
                ));
            }
        }
        out
    };
    let layer_equal = |m: &Model32, i: usize| {
        layer_pairs(i).iter().all(|(a, b)| {
            bits32(m.store().get(a).unwrap().data()) == bits32(m.store().get(b).unwrap().data())
        })
    };

    let mut init = Model32::build(small_cfg(vocab.len()), SharingPreset::ContextInit.config(), 8).unwrap();
    for i in 0..2 {
        assert!(
            layer_equal(&init, i),
            "layer {i}: context attention must start as a bitwise copy of self-attention"
        );
        for (a, b) in layer_pairs(i) {
            assert_ne!(
                init.store().slot_of(&a).unwrap(),
                init.store().slot_of(&b).unwrap(),
                "initialization must copy, not tie"
            );
        }
    }
    let one_step = TrainConfig {
        max_steps: 1,
        warmup_steps: 0,
        peak_lr: 1e-3,
        batch_tokens: 128,
        eval_interval: 10_000,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&mut init, &examples, &[], &vocab, &one_step, &mut |_| Ok(())).unwrap();
    for i in 0..2 {
        assert!(
            !layer_equal(&init, i),
            "layer {i}: one update must separate context attention from self-attention"
        );
    }

    let mut tied = Model32::build(small_cfg(vocab.len()), SharingPreset::TiedContext.config(), 8).unwrap();
    let fifty = TrainConfig {
        max_steps: 50,
        warmup_steps: 5,
        peak_lr: 1e-3,
        batch_tokens: 128,
        eval_interval: 10_000,
        seed: 5,
        ..TrainConfig::default()
    };
    train(&mut tied, &examples, &[], &vocab, &fifty, &mut |_| Ok(())).unwrap();
    for i in 0..2 {
        for (a, b) in layer_pairs(i) {
            assert_eq!(
                tied.store().slot_of(&a).unwrap(),
                tied.store().slot_of(&b).unwrap(),
                "tied context attention must share storage"
            );
        }
        assert!(layer_equal(&tied, i), "layer {i}: tied context attention must stay identical");
    }
    println!(
        "criterion 4: context attention equals self-attention at step 0, differs after one update, \
         and stays identical for 50 updates when tied"
    );
}

#[test]
fn c05_decoder_logits_ignore_future_target_tokens() {
    let vocab = fixture::vocab();
    let mut trials = 0;
    for model_seed in 0..5u64 {
        let model =
            Model32::build(small_cfg(vocab.len()), SharingPreset::Transformer.config(), model_seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + model_seed);
        for _ in 0..10 {
            let word = |rng: &mut ChaCha8Rng| rng.gen_range(5..vocab.len());
            let src: Vec<usize> = (0..rng.gen_range(2..=6)).map(|_| word(&mut rng)).collect();
            let mt: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| word(&mut rng)).collect();
            let pair = encode_pair(&src, &mt, &vocab, 32).unwrap();
            let enc = model.encode_values(&pair.ids, &pair.segments, &pair.positions).unwrap();

            let len = rng.gen_range(3..=8);
            let mut input: Vec<usize> = (0..len).map(|_| word(&mut rng)).collect();
            input[0] = vocab.cls_id();
            let segments = vec![Segment::B; len];
            let positions: Vec<usize> = (0..len).collect();
            let before = model.decode_logits_values(&enc, &input, &segments, &positions).unwrap();

            let t = rng.gen_range(0..len - 1);
            let mut perturbed = input.clone();
            for slot in perturbed.iter_mut().skip(t + 1) {
                *slot = word(&mut rng);
            }
            if perturbed == input {
                perturbed[t + 1] = if input[t + 1] == 5 { 6 } else { 5 };
            }
            let after = model.decode_logits_values(&enc, &perturbed, &segments, &positions).unwrap();
            for i in 0..=t {
                assert!(
                    bits32(before.row(i)) == bits32(after.row(i)),
                    "seed {model_seed}: logits at position {i} saw a change beyond position {t}"
                );
            }
            trials += 1;
        }
    }
    assert_eq!(trials, 50);
    println!("criterion 5: 50 prefix-perturbation trials left every earlier logit row bit-identical");
}

#[test]
fn c06_pair_encoding_has_one_position_reset_and_one_segment_change() {
    let vocab = fixture::vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..20 {
        let src: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(5..vocab.len())).collect();
        let mt: Vec<usize> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(5..vocab.len())).collect();
        let pair = encode_pair(&src, &mt, &vocab, 64).unwrap();
        let n = pair.len();
        assert_eq!(n, src.len() + mt.len() + 3, "case {case}: [CLS] src [SEP] mt [SEP]");
        assert_eq!(pair.ids[0], vocab.cls_id(), "case {case}");
        assert_eq!(pair.ids[src.len() + 1], vocab.sep_id(), "case {case}");
        assert_eq!(pair.ids[n - 1], vocab.sep_id(), "case {case}");
        assert_eq!(
            pair.ids.iter().filter(|&&id| id == vocab.sep_id()).count(),
            2,
            "case {case}: exactly two separators"
        );

        let boundary = src.len() + 2;
        let flips: Vec<usize> = (1..n).filter(|&i| pair.segments[i] != pair.segments[i - 1]).collect();
        assert_eq!(flips, vec![boundary], "case {case}: segment must change exactly once, A then B");
        assert_eq!(pair.segments[0], Segment::A, "case {case}");
        assert_eq!(pair.segments[n - 1], Segment::B, "case {case}");

        let resets: Vec<usize> = (1..n).filter(|&i| pair.positions[i] == 0).collect();
        assert_eq!(resets, vec![boundary], "case {case}: positions must reset exactly once");
        assert_eq!(pair.positions[0], 0, "case {case}");
        for i in 1..n {
            if i != boundary {
                assert_eq!(
                    pair.positions[i],
                    pair.positions[i - 1] + 1,
                    "case {case}: positions must step by one inside a region"
                );
            }
        }
    }
    println!("criterion 6: 20 random pairs each encode with a single segment change and a single position reset");
}

#[test]
fn c07_training_overfits_a_small_corpus_and_reproduces_its_edits() {
    let started = Instant::now();
    let vocab = fixture::vocab();
    let corpus = fixture::copy_edit_corpus(64, 11);
    let cfg = ModelConfig::toy(vocab.len());
    let max_positions = cfg.max_positions;
    let mut model = Model32::build(cfg, SharingPreset::TiedSelf.config(), 1).unwrap();
    let examples = encode_corpus(&corpus, &vocab, max_positions).unwrap();
    let train_cfg = TrainConfig {
        max_steps: 2000,
        warmup_steps: 100,
        peak_lr: 2e-3,
        batch_tokens: 512,
        ema_decay: 0.02,
        eval_interval: 100,
        seed: 42,
        stop_at_ter: Some(5.0),
        dev_beam: BeamConfig { beam: 4, max_len: 32 },
        ..TrainConfig::default()
    };
    let mut finished: Option<Model32> = None;
    let report = train(&mut model, &examples, &corpus, &vocab, &train_cfg, &mut |event| {
        if let TrainEvent::Finished { model } = event {
            finished = Some(model.clone());
        }
        Ok(())
    })
    .unwrap();
    let best = report.best.clone().expect("training evaluates at least once");
    assert!(
        best.dev_ter <= 5.0,
        "training-set TER {:.2} after {} steps, needed 5.0 within 2000",
        best.dev_ter,
        report.steps
    );
    assert!(report.steps <= 2000);
    let train_secs = started.elapsed().as_secs_f64();
    assert!(train_secs < 600.0, "overfit run took {train_secs:.0}s, budget 600s on one core");

    let editor = finished.expect("a completed run reports its final weights");
    let items: Vec<(String, String)> = corpus.iter().map(|t| (t.src.clone(), t.mt.clone())).collect();
    let outs = translate_corpus(&editor, &vocab, &items, &BeamConfig { beam: 4, max_len: 32 });
    let verbatim = outs.iter().zip(&corpus).filter(|(o, t)| o.text == t.pe).count();
    assert!(verbatim >= 58, "{verbatim}/64 corrected lines matched exactly, needed 58 (90%)");
    println!(
        "criterion 7: training-set TER {:.2} at step {}, {verbatim}/64 lines reproduced verbatim ({train_secs:.0}s)",
        best.dev_ter, report.steps
    );
}

const ABLATE_SETTINGS: &str = r#"[model]
template = "toy"

[train]
max_steps = 300
warmup_steps = 50
peak_lr = 2e-3
batch_tokens = 512
ema_decay = 0.02
eval_interval = 10000
seed = 42
init_seed = 1

[data]
train = "fx/train.tsv"
vocab = "fx/vocab.txt"
"#;

#[test]
fn c08_ablation_reports_all_six_variants_in_order_and_each_learns() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir: &Path = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_ape"))
        .args(["make-fixture", "--out", "fx", "--count", "64", "--seed", "11"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "make-fixture failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::write(dir.join("ablate.toml"), ABLATE_SETTINGS).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ape"))
        .args(["ablate", "--config", "ablate.toml"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "ablate failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 7, "header plus six variant rows:\n{stdout}");
    assert_eq!(lines[0], "variant\tparams\tfirst_loss\tfinal_loss\tdev_ter\tdev_bleu");
    let mut params = Vec::new();
    for (row, preset) in lines[1..].iter().zip(SharingPreset::ALL) {
        let fields: Vec<&str> = row.split('\t').collect();
        assert_eq!(fields.len(), 6, "malformed row: {row}");
        assert_eq!(fields[0], preset.name(), "rows must follow the ablation order");
        let count: usize = fields[1].parse().unwrap_or_else(|_| panic!("bad params in: {row}"));
        let first: f64 = fields[2].parse().unwrap_or_else(|_| panic!("bad first_loss in: {row}"));
        let last: f64 = fields[3].parse().unwrap_or_else(|_| panic!("bad final_loss in: {row}"));
        assert!(first.is_finite() && last.is_finite(), "non-finite losses in: {row}");
        assert!(
            last <= 0.5 * first,
            "{}: loss {first:.4} -> {last:.4} is less than a 50% reduction",
            preset.name()
        );
        params.push(count);
    }
    assert_eq!(params[0], params[1], "initialization-only variants share a parameter count");
    assert_eq!(params[1], params[2], "initialization-only variants share a parameter count");
    assert!(
        params[2] > params[3] && params[3] > params[4] && params[4] > params[5],
        "each tying step must shrink the parameter count: {params:?}"
    );
    println!(
        "criterion 8: six ablation rows in order, every variant halved its training loss ({:.0}s)",
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn c09_edit_rate_and_precision_scores_match_hand_computed_values() {
    // Twelve edit-rate cases, hand-worked. The long pair needs one block
    // shift ("this week" after "denied") plus one insertion ("american"):
    // 2 edits over 13 reference words.
    let ter_cases: &[(&str, &str, f64)] = &[
        ("a b c", "a b c", 0.0),
        ("a x c", "a b c", 1.0 / 3.0),
        ("a b b c", "a b c", 1.0 / 3.0),
        ("a c", "a b c", 1.0 / 3.0),
        ("", "a b c", 1.0),
        ("", "", 0.0),
        ("a b", "", 2.0),
        ("b c a", "a b c", 1.0 / 3.0),
        ("d e f a b c", "a b c d e f", 1.0 / 6.0),
        ("c b a", "a b c", 2.0 / 3.0),
        (
            "this week saudi arabia denied information published in the new york times",
            "saudi arabia denied this week information published in the american new york times",
            2.0 / 13.0,
        ),
        ("a b c d", "a b x y", 2.0 / 4.0),
    ];
    for (hyp, reference, want) in ter_cases {
        let got = ter(hyp, reference);
        assert!(
            (got - want).abs() < 1e-4,
            "ter({hyp:?}, {reference:?}) = {got:.6}, wanted {want:.6}"
        );
    }

    // Six sentence-precision cases. The repeated-"the" pair exercises
    // clipping: precisions 5/6, 4/5, 3/4, 2/3 multiply to 1/3. A perfect
    // three-word match scores zero because it has no 4-gram at all.
    let bleu_cases: &[(&str, &str, f64)] = &[
        ("a b c d", "a b c d", 100.0),
        ("a b c d", "a b c d e", 100.0 * (1.0f64 - 5.0 / 4.0).exp()),
        ("a b c d e", "a b c d", 100.0 * 0.2f64.powf(0.25)),
        ("a b c d the the", "a b c d the", 100.0 * (1.0f64 / 3.0).powf(0.25)),
        ("the the the", "the cat", 0.0),
        ("a b c", "a b c", 0.0),
    ];
    for (hyp, reference, want) in bleu_cases {
        let got = bleu(hyp, reference);
        assert!(
            (got - want).abs() < 1e-4,
            "bleu({hyp:?}, {reference:?}) = {got:.6}, wanted {want:.6}"
        );
    }

    // Corpus pooling: clipped counts sum over pairs before the geometric mean.
    let pooled = bleu_corpus(&[("a b c d", "a b c d"), ("e f g h", "e f g x")]);
    let want = 100.0 * (7.0f64 / 8.0 * (5.0 / 6.0) * (3.0 / 4.0) * (1.0 / 2.0)).powf(0.25);
    assert!((pooled - want).abs() < 1e-4, "pooled bleu {pooled:.6}, wanted {want:.6}");

    // Corpus scores in percent: 1 edit over 7 reference words.
    let scores = score_corpus(
        &["a x c".to_string(), "a b c d".to_string()],
        &["a b c".to_string(), "a b c d".to_string()],
    );
    assert!((scores.ter - 100.0 / 7.0).abs() < 1e-4, "corpus ter {:.6}", scores.ter);
    let want_bleu = 100.0 * (6.0f64 / 7.0 * (3.0 / 5.0) * (2.0 / 3.0)).powf(0.25);
    assert!((scores.bleu - want_bleu).abs() < 1e-4, "corpus bleu {:.6}", scores.bleu);

    // Greedy shift search against exhaustive minimal cost on 200 small cases.
    let lexicon = ["a", "b", "c", "d"];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    for _ in 0..200 {
        let draw = |rng: &mut ChaCha8Rng, lo: usize| {
            let len = rng.gen_range(lo..=6);
            (0..len)
                .map(|_| lexicon[rng.gen_range(0..lexicon.len())])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let hyp = draw(&mut rng, 0);
        let reference = draw(&mut rng, 1);
        let greedy = ter_counts(&hyp, &reference).edits;
        let exact = exhaustive_ter_edits(&hyp, &reference);
        assert!(
            greedy >= exact,
            "greedy found {greedy} edits for {hyp:?} vs {reference:?}, below the true minimum {exact}"
        );
        if greedy == exact {
            agree += 1;
        }
    }
    assert!(agree >= 180, "greedy matched the exhaustive search on {agree}/200 cases, needed 180");
    println!(
        "criterion 9: 20 hand-scored pairs reproduced to 4 decimals; greedy shifts matched \
         the exhaustive search on {agree}/200 random cases"
    );
}

#[test]
fn c10_beam_eight_finds_the_exhaustive_best_decode() {
    let vocab = words_vocab(5);
    assert_eq!(vocab.len(), 10);
    let beam_cfg = BeamConfig { beam: 8, max_len: 4 };
    for seed in 100..120u64 {
        let model = Model64::build(small_cfg(vocab.len()), SharingPreset::Transformer.config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
        let src: Vec<usize> = (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(5..vocab.len())).collect();
        let mt: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(5..vocab.len())).collect();
        let pair = encode_pair(&src, &mt, &vocab, 32).unwrap();
        let enc = model.encode_values(&pair.ids, &pair.segments, &pair.positions).unwrap();

        let hyps = beam_search(&model, &enc, &vocab, &beam_cfg).unwrap();
        let (best_tokens, best_norm) = exhaustive_best_decode(&model, &enc, &vocab, beam_cfg.max_len);
        assert_eq!(
            hyps[0].tokens, best_tokens,
            "seed {seed}: beam result disagreed with the exhaustive search"
        );
        assert!(
            (hyps[0].normalized() - best_norm).abs() < 1e-6,
            "seed {seed}: scores diverged ({} vs {best_norm})",
            hyps[0].normalized()
        );
    }
    println!("criterion 10: beam width 8 matched the exhaustive best decode for all 20 random models");
}

#[test]
fn c11_learning_rate_triangle_and_weight_shadow_follow_their_closed_forms() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.peak_lr, 5e-5);
    assert_eq!(cfg.warmup_steps, 5000);
    assert_eq!(cfg.max_steps, 10_000);
    assert_eq!(cfg.lr_at(0), 0.0);
    assert!((cfg.lr_at(2500) - 2.5e-5).abs() < 1e-18, "mid-warmup lr {}", cfg.lr_at(2500));
    assert!((cfg.lr_at(5000) - 5e-5).abs() < 1e-18, "peak lr {}", cfg.lr_at(5000));
    assert_eq!(cfg.lr_at(cfg.max_steps), 0.0);
    // The triangle is continuous at the warmup corner: one step on either
    // side sits within one ramp increment of the peak.
    let slope = cfg.peak_lr / cfg.warmup_steps as f64;
    for step in [cfg.warmup_steps - 1, cfg.warmup_steps + 1] {
        let gap = cfg.peak_lr - cfg.lr_at(step);
        assert!(
            gap > 0.0 && gap <= slope * 1.000001,
            "lr_at({step}) = {} is not within one increment of the peak",
            cfg.lr_at(step)
        );
    }

    // Thirty shadow updates after a +0.5 parameter bump land exactly on
    // s = p - (1 - decay)^30 * 0.5.
    let vocab = fixture::vocab();
    let mut model = Model64::build(small_cfg(vocab.len()), SharingPreset::TiedContext.config(), 3).unwrap();
    let mut ema = Ema::new(&model, 0.25);
    for i in 0..model.store().num_slots() {
        for x in model.store_mut().slot_mut(i).data_mut() {
            *x += 0.5;
        }
    }
    for _ in 0..30 {
        ema.update(&model);
    }
    let shadow = ema.shadow_model(&model).unwrap();
    let shrink = 0.75f64.powi(30);
    for i in 0..model.store().num_slots() {
        for (s, p) in shadow.store().slot(i).data().iter().zip(model.store().slot(i).data()) {
            let want = p - shrink * 0.5;
            assert!((s - want).abs() < 1e-12, "slot {i}: shadow {s} vs closed form {want}");
        }
    }
    println!(
        "criterion 11: lr triangle hits 0 / 2.5e-5 / 5e-5 / 0 with a continuous corner; \
         30 shadow updates match the closed form to 1e-12"
    );
}

#[test]
fn c12_checkpoints_round_trip_bit_for_bit_with_their_tie_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let vocab = fixture::vocab();
    let model = Model32::build(small_cfg(vocab.len()), SharingPreset::TiedContext.config(), 13).unwrap();
    let first = tmp.path().join("a.ckpt");
    checkpoint::save(&model, 77, &first).unwrap();

    let (mut loaded, step) = checkpoint::load::<f32>(&first).unwrap();
    assert_eq!(step, 77);
    assert_eq!(loaded.cfg(), model.cfg());
    assert_eq!(loaded.store().num_slots(), model.store().num_slots());
    assert_eq!(loaded.store().canonical_names(), model.store().canonical_names());
    for i in 0..model.store().num_slots() {
        assert_eq!(model.store().slot(i).shape(), loaded.store().slot(i).shape(), "slot {i} shape");
        assert!(
            bits32(model.store().slot(i).data()) == bits32(loaded.store().slot(i).data()),
            "slot {i} values must round-trip bit-for-bit"
        );
        assert_eq!(model.store().decays(i), loaded.store().decays(i), "slot {i} decay flag");
    }
    assert_eq!(
        normalize_groups(loaded.store().tie_groups()),
        normalize_groups(model.store().tie_groups()),
        "tie groups must reconstruct exactly"
    );

    // Reconstructed ties are storage, not copies.
    let idx = loaded.store().slot_of("encoder.0.attn.q.weight").unwrap();
    let orig = loaded.store().slot(idx).data()[0];
    loaded.store_mut().slot_mut(idx).data_mut()[0] = 42.25;
    assert_eq!(
        loaded.store().get("decoder.0.context_attn.q.weight").unwrap().data()[0],
        42.25,
        "a reloaded tie must alias its storage"
    );
    loaded.store_mut().slot_mut(idx).data_mut()[0] = orig;

    // Re-serializing the reloaded model reproduces the file byte for byte.
    let second = tmp.path().join("b.ckpt");
    checkpoint::save(&loaded, 77, &second).unwrap();
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(&second).unwrap(),
        "re-serialization must be byte-exact"
    );
    println!("criterion 12: checkpoint round-trips bit-for-bit with ties and decay flags intact");
}
