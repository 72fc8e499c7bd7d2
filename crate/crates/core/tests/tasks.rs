use rand::Rng;
use switchhead_core::attention::AttentionConfig;
use switchhead_core::model::{build, MlpSpec, ModelSpec};
use switchhead_core::numerics::rng::rng_for;
use switchhead_core::numerics::Tensor;
use switchhead_core::tasks::listops::{N_CLASSES, VOCAB_SIZE};
use switchhead_core::tasks::{evaluate, gen_listops, train, CharCorpus, ListOpsParams, Split, Tally, Task, TrainConfig};
use switchhead_core::Error;

/// Recursive evaluation of the printed expression, independent of the
/// library's token-level evaluator.
fn oracle(text: &str) -> u32 {
    fn expr(words: &[&str], i: &mut usize) -> u32 {
        if words[*i] != "(" {
            let v = words[*i].parse().unwrap();
            *i += 1;
            return v;
        }
        let op = words[*i + 1];
        *i += 2;
        let mut args = Vec::new();
        while words[*i] != ")" {
            args.push(expr(words, i));
        }
        *i += 1;
        args.sort();
        match op {
            "MAX" => args[args.len() - 1],
            "MIN" => args[0],
            "MED" => args[(args.len() - 1) / 2],
            "SM" => args.iter().sum::<u32>() % 10,
            _ => panic!("{op}"),
        }
    }
    let words: Vec<&str> = text.split(' ').collect();
    let mut i = 0;
    let v = expr(&words, &mut i);
    assert_eq!(i, words.len());
    v
}

#[test]
fn generated_labels_match_an_independent_evaluator() {
    let data = gen_listops(10_000, &ListOpsParams { max_depth: 4, ..Default::default() }, 1).unwrap();
    let mut hist = [0usize; 10];
    let mut oracle_hist = [0usize; 10];
    for e in &data {
        let v = oracle(&e.text()) as usize;
        assert_eq!(v, e.label, "{}", e.text());
        hist[e.label] += 1;
        oracle_hist[v] += 1;
    }
    assert_eq!(hist, oracle_hist);
    assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
}

#[test]
fn chance_level_accuracy_of_a_random_predictor() {
    let data = gen_listops(10_000, &ListOpsParams::default(), 2).unwrap();
    let mut r = rng_for(0, "predictor");
    let logits: Vec<f64> = (0..data.len() * N_CLASSES).map(|_| r.gen()).collect();
    let mut t = Tally::default();
    t.add(&Tensor::new(&[data.len(), N_CLASSES], logits).unwrap(), &data.iter().map(|e| e.label).collect::<Vec<_>>());
    assert!((t.accuracy() - 0.1).abs() < 0.02, "{}", t.accuracy());
}

fn listops_spec(d: usize, heads: usize, d_head: usize, layers: usize) -> ModelSpec {
    let mut attention = AttentionConfig::dense(d, heads, d_head);
    attention.causal = false;
    ModelSpec {
        n_layers: layers,
        d_model: d,
        vocab_size: VOCAB_SIZE,
        chunk_len: 64,
        tied_embeddings: false,
        dropout: 0.0,
        n_classes: Some(N_CLASSES),
        attention,
        mlp: MlpSpec::Dense { d_ff: 2 * d },
    }
}

fn small_listops(n: usize, seed: u64) -> Task {
    let p = ListOpsParams { max_depth: 2, max_args: 3, max_len: 24, nest_prob: 0.3 };
    Task::ListOps { train: gen_listops(n, &p, seed).unwrap(), valid: gen_listops(n, &p, seed + 1).unwrap() }
}

fn corpus() -> CharCorpus {
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
    CharCorpus::from_bytes(text.into_bytes(), 0.1).unwrap()
}

fn lm_spec(vocab: usize) -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        d_model: 16,
        vocab_size: vocab,
        chunk_len: 8,
        tied_embeddings: true,
        dropout: 0.1,
        n_classes: None,
        attention: AttentionConfig::switchhead(16, 2, 8, 3, 2).with_context(2),
        mlp: MlpSpec::Dense { d_ff: 32 },
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let cfg = TrainConfig { steps: 10, batch_size: 4, lr: 0.0, log_every: 5, ..Default::default() };
    let task = small_listops(16, 0);
    let mut m = build(&listops_spec(8, 2, 4, 1), 0).unwrap();
    let before = m.params().clone();
    train(&mut m, &task, &cfg, 0).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id).data(), m.params().get(id).data());
    }
    let c = Task::Chars(corpus());
    let mut m = build(&lm_spec(corpus().vocab_size()), 0).unwrap();
    let before = m.params().clone();
    train(&mut m, &c, &cfg, 0).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id).data(), m.params().get(id).data());
    }
}

#[test]
fn overfits_32_listops_samples() {
    let task = small_listops(32, 7);
    let mut m = build(&listops_spec(32, 4, 8, 2), 7).unwrap();
    let cfg = TrainConfig { steps: 400, batch_size: 32, lr: 3e-3, clip_norm: 1.0, log_every: 50, ..Default::default() };
    train(&mut m, &task, &cfg, 7).unwrap();
    let acc = evaluate(&m, &task, Split::Train).unwrap().accuracy.unwrap();
    let steps = cfg.steps;
    assert_eq!(acc, 1.0, "train accuracy {acc} after {steps} steps");
}

#[test]
fn training_is_bit_reproducible_and_logs_increase() {
    let cfg = TrainConfig { steps: 12, batch_size: 4, lr: 1e-3, log_every: 4, ..Default::default() };
    let run = || {
        let mut m = build(&lm_spec(corpus().vocab_size()), 3).unwrap();
        let rows = train(&mut m, &Task::Chars(corpus()), &cfg, 3).unwrap();
        (rows, evaluate(&m, &Task::Chars(corpus()), Split::Valid).unwrap())
    };
    let (a, ea) = run();
    let (b, eb) = run();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 12]);
    assert!(a.iter().all(|r| r.bpc.is_some() && r.accuracy.is_none()));
}

#[test]
fn language_model_learns_a_repetitive_text() {
    let c = corpus();
    let mut m = build(&lm_spec(c.vocab_size()), 1).unwrap();
    let task = Task::Chars(c);
    let before = evaluate(&m, &task, Split::Valid).unwrap().bpc.unwrap();
    let cfg = TrainConfig { steps: 150, batch_size: 8, lr: 3e-3, clip_norm: 1.0, log_every: 50, ..Default::default() };
    let rows = train(&mut m, &task, &cfg, 1).unwrap();
    let after = evaluate(&m, &task, Split::Valid).unwrap();
    assert!(after.bpc.unwrap() < 0.5 * before, "{before} -> {after:?}; {rows:?}");
    assert!((after.perplexity.unwrap().ln() / std::f64::consts::LN_2 - after.bpc.unwrap()).abs() < 1e-9);
}

#[test]
fn divergence_aborts_with_a_snapshot() {
    let cfg = TrainConfig { steps: 50, batch_size: 4, lr: 1e300, clip_norm: 1e300, log_every: 1, ..Default::default() };
    let mut m = build(&listops_spec(8, 2, 4, 1), 0).unwrap();
    match train(&mut m, &small_listops(16, 0), &cfg, 0) {
        Err(Error::Diverged { step, loss, snapshot }) => {
            assert!(step > 1 && !loss.is_finite() && snapshot.contains("lr"), "{step} {loss} {snapshot}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_models_and_empty_splits_are_rejected() {
    let task = small_listops(8, 0);
    let mut causal = listops_spec(8, 2, 4, 1);
    causal.attention.causal = true;
    let m = build(&causal, 0).unwrap();
    assert!(matches!(evaluate(&m, &task, Split::Valid), Err(Error::Contract(_))));
    let m = build(&lm_spec(3), 0).unwrap();
    assert!(matches!(evaluate(&m, &Task::Chars(corpus()), Split::Valid), Err(Error::Contract(_))));
    let empty = Task::ListOps { train: Vec::new(), valid: Vec::new() };
    let m = build(&listops_spec(8, 2, 4, 1), 0).unwrap();
    assert!(matches!(evaluate(&m, &empty, Split::Valid), Err(Error::Contract(_))));
}
