use emkd_core::encoder::{
    attr_probs, embed, encode, init_ensemble, item_logits, EncoderParams, SeqBatch,
};
use emkd_core::gradcheck::tiny_setup;
use emkd_core::rng::StreamRng;
use emkd_core::trainer::Trainer;
use emkd_core::{EmkdError, Mode, ModelConfig, TrainConfig};
use emkd_tape::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn small() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        heads: 2,
        n_networks: 1,
        dropout_rate: 0.0,
        init_std: 0.5,
        ..ModelConfig::for_vocab(10, 3, 6)
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    t
}

fn hidden(cfg: &ModelConfig, p: &EncoderParams, rows: &[Vec<usize>]) -> Vec<f64> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let batch = SeqBatch::new(rows, cfg.max_len).unwrap();
    let h = encode(&mut g, cfg, &vars, &batch, None).unwrap();
    g.value(h).to_vec()
}

fn embedded(cfg: &ModelConfig, p: &EncoderParams, seq: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let batch = SeqBatch::new(&[seq.to_vec()], cfg.max_len).unwrap();
    let e = embed(&mut g, cfg, &vars, &batch).unwrap();
    g.value(e).to_vec()
}

#[test]
fn embedding_is_item_row_plus_position_row() {
    let cfg = small();
    let d = cfg.hidden_dim;
    let seq = vec![11, 11, 3, 0, 7, 10];
    let mut p = EncoderParams::init(&cfg, 1).unwrap();
    p.item_emb = random_tensor(p.item_emb.shape(), 2);
    p.pos_emb = random_tensor(p.pos_emb.shape(), 3);

    let both = embedded(&cfg, &p, &seq);
    for (t, &id) in seq.iter().enumerate() {
        for c in 0..d {
            let want = p.item_emb.row(id)[c] + p.pos_emb.row(t)[c];
            assert_eq!(both[t * d + c], want);
        }
    }

    let mut zero_items = p.clone();
    zero_items.item_emb.fill(0.0);
    assert_eq!(embedded(&cfg, &zero_items, &seq), p.pos_emb.data());

    let mut zero_pos = p.clone();
    zero_pos.pos_emb.fill(0.0);
    let rows: Vec<f64> = seq.iter().flat_map(|&id| p.item_emb.row(id).to_vec()).collect();
    assert_eq!(embedded(&cfg, &zero_pos, &seq), rows);
}

#[test]
fn out_of_range_token_is_a_vocabulary_error() {
    let cfg = small();
    let p = EncoderParams::init(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let batch = SeqBatch::new(&[vec![0, 1, 2, 3, 4, 12]], 6).unwrap();
    assert!(matches!(
        embed(&mut g, &cfg, &vars, &batch),
        Err(EmkdError::Vocabulary(_))
    ));
}

#[test]
fn pad_positions_do_not_reach_real_positions() {
    let cfg = small();
    let d = cfg.hidden_dim;
    let pad = cfg.pad_id();
    let p = EncoderParams::init(&cfg, 4).unwrap();
    let seq = vec![pad, pad, pad, 4, 2, 9];
    let base = hidden(&cfg, &p, std::slice::from_ref(&seq));

    // swapping two pad ids
    let mut swapped = seq.clone();
    swapped.swap(0, 2);
    assert_eq!(hidden(&cfg, &p, &[swapped]), base);

    // even a different pad embedding leaves real positions untouched
    let mut q = p.clone();
    q.item_emb.row_mut(pad).iter_mut().for_each(|x| *x += 3.0);
    let moved = hidden(&cfg, &q, &[seq]);
    for (a, b) in base[3 * d..].iter().zip(&moved[3 * d..]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn no_dropout_is_deterministic() {
    let mut cfg = small();
    let p = EncoderParams::init(&cfg, 5).unwrap();
    let rows = vec![vec![1, 2, 3, 4, 5, 6], vec![11, 11, 11, 0, 1, 10]];
    assert_eq!(hidden(&cfg, &p, &rows), hidden(&cfg, &p, &rows));

    // rate 0 with a live stream is the same as no stream
    cfg.dropout_rate = 0.0;
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let batch = SeqBatch::new(&rows, 6).unwrap();
    let mut rng = StreamRng::seed_from_u64(9);
    let h = encode(&mut g, &cfg, &vars, &batch, Some(&mut rng)).unwrap();
    assert_eq!(g.value(h), hidden(&cfg, &p, &rows).as_slice());
}

#[test]
fn causal_mode_ignores_later_items() {
    let cfg = ModelConfig {
        mode: Mode::AutoregressiveNip,
        ..small()
    };
    let d = cfg.hidden_dim;
    let p = EncoderParams::init(&cfg, 6).unwrap();
    let seq = vec![1, 2, 3, 4, 5, 6];
    let base = hidden(&cfg, &p, std::slice::from_ref(&seq));
    for t in 0..5 {
        let mut changed = seq.clone();
        for x in &mut changed[t + 1..] {
            *x = (*x + 3) % 10;
        }
        let h = hidden(&cfg, &p, &[changed]);
        for (a, b) in base[..(t + 1) * d].iter().zip(&h[..(t + 1) * d]) {
            assert!((a - b).abs() < 1e-12, "position <= {t} moved");
        }
        assert_ne!(base[(t + 1) * d..], h[(t + 1) * d..]);
    }
}

#[test]
fn bidirectional_masking_is_felt_elsewhere_after_training() {
    let (cfg, split) = tiny_setup().unwrap();
    let train = TrainConfig {
        epochs: 10,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), train).unwrap();
    for _ in 0..10 {
        trainer.train_epoch(&split).unwrap();
    }
    let d = cfg.hidden_dim;
    let p = &trainer.ensemble.networks[0];
    let seq = vec![0, 1, 2, 3, 4, 5];
    let base = hidden(&cfg, p, std::slice::from_ref(&seq));
    for i in 0..seq.len() {
        let mut masked = seq.clone();
        masked[i] = cfg.mask_id();
        let h = hidden(&cfg, p, &[masked]);
        let moved = (0..seq.len()).filter(|&j| j != i).any(|j| {
            let diff: f64 = (0..d).map(|c| (h[j * d + c] - base[j * d + c]).powi(2)).sum();
            diff.sqrt() > 0.0
        });
        assert!(moved, "masking position {i} changed nothing else");
    }
}

fn head_outputs(p: &EncoderParams, h: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let hv = g.constant(h);
    let z = item_logits(&mut g, &vars, hv).unwrap();
    let a = attr_probs(&mut g, &vars, hv).unwrap();
    (g.value(z).to_vec(), g.value(a).to_vec())
}

#[test]
fn heads_on_zero_input() {
    let cfg = small();
    let mut p = EncoderParams::init(&cfg, 7).unwrap();
    p.item_b = random_tensor(&[10], 8);
    let h = Tensor::zeros(&[1, 8]);
    let (z, a) = head_outputs(&p, &h);
    assert_eq!(z, p.item_b.data());
    assert_eq!(z.len(), cfg.vocab_size);
    assert!(a.iter().all(|&x| x == 0.5));

    p.item_w.fill(0.0);
    p.item_b.fill(0.0);
    let (z, _) = head_outputs(&p, &random_tensor(&[1, 8], 9));
    assert!(z.iter().all(|&x| x == 0.0));
}

#[test]
fn heads_match_affine_oracles() {
    let cfg = small();
    let mut p = EncoderParams::init(&cfg, 10).unwrap();
    p.item_b = random_tensor(&[10], 11);
    p.attr_b = random_tensor(&[3], 12);
    let h = random_tensor(&[4, 8], 13);
    let (z, a) = head_outputs(&p, &h);
    for r in 0..4 {
        for v in 0..10 {
            let want: f64 = (0..8).map(|c| h.row(r)[c] * p.item_w.row(c)[v]).sum::<f64>() + p.item_b.data()[v];
            assert!((z[r * 10 + v] - want).abs() < 1e-12);
        }
        for k in 0..3 {
            let s: f64 = (0..8).map(|c| h.row(r)[c] * p.attr_w.row(c)[k]).sum::<f64>() + p.attr_b.data()[k];
            let want = 1.0 / (1.0 + (-s).exp());
            assert!((a[r * 3 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn attribute_probability_rises_with_its_logit() {
    let cfg = small();
    let mut p = EncoderParams::init(&cfg, 14).unwrap();
    p.attr_w.fill(0.0);
    let mut last = 0.0;
    for bias in [0.0, 1.0, 2.0, 5.0, 10.0, 20.0] {
        p.attr_b.fill(bias);
        let (_, a) = head_outputs(&p, &Tensor::zeros(&[1, 8]));
        assert!(a[0] > last && a[0] <= 1.0);
        last = a[0];
    }
    assert!(last > 1.0 - 1e-8);
}

proptest! {
    #[test]
    fn attribute_probabilities_stay_open_interval(
        seed in 0u64..1000,
        scale in 0.1f64..5.0,
    ) {
        let cfg = small();
        let p = EncoderParams::init(&cfg, seed).unwrap();
        let mut h = random_tensor(&[5, 8], seed + 1);
        h.data_mut().iter_mut().for_each(|x| *x *= scale);
        let (_, a) = head_outputs(&p, &h);
        prop_assert!(a.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn ensemble_init_is_reproducible_and_seeded() {
    let cfg = ModelConfig {
        n_networks: 3,
        ..small()
    };
    let a = init_ensemble(&cfg, &[1, 2, 3]).unwrap();
    let b = init_ensemble(&cfg, &[1, 2, 3]).unwrap();
    for (x, y) in a.networks.iter().zip(&b.networks) {
        for (s, t) in x.tensors().iter().zip(y.tensors()) {
            let bits = |v: &Tensor| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s), bits(t));
        }
    }
    assert_ne!(a.networks[0], a.networks[1]);
    assert!(matches!(
        init_ensemble(&cfg, &[1, 2, 1]),
        Err(EmkdError::Param(_))
    ));
    assert!(matches!(init_ensemble(&cfg, &[1, 2]), Err(EmkdError::Param(_))));
}

#[test]
fn three_networks_give_three_logit_vectors() {
    let cfg = ModelConfig {
        n_networks: 3,
        init_std: 0.02,
        ..small()
    };
    let e = init_ensemble(&cfg, &[42, 43, 44]).unwrap();
    let seq = vec![cfg.pad_id(), 3, 1, 4, 1, cfg.mask_id()];
    let outs: Vec<Vec<f64>> = e
        .networks
        .iter()
        .map(|p| {
            let h = hidden(&cfg, p, std::slice::from_ref(&seq));
            let last = Tensor::new(vec![1, 8], h[5 * 8..].to_vec()).unwrap();
            head_outputs(p, &last).0
        })
        .collect();
    assert_ne!(outs[0], outs[1]);
    assert_ne!(outs[1], outs[2]);
    assert_ne!(outs[0], outs[2]);
}

#[test]
fn parameter_count_at_default_width() {
    let cfg = ModelConfig::for_vocab(12101, 1221, 50);
    let p = EncoderParams::init(&cfg, 0).unwrap();
    assert_eq!(p.numel(), cfg.parameter_count());
    println!("parameters per network at d=256, |V|=12101, |A|=1221: {}", p.numel());
}
