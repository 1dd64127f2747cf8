mod common;

use ctrlkit::model::{
    count_params, AttnScale, Checkpoint, EmbedScale, Mode, Model, ModelConfig, ModelParams, ScoreModel,
};
use ctrlkit::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(embed_scale: EmbedScale) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 2,
        n_heads: 4,
        vocab_size: 23,
        context: 12,
        dropout: 0.1,
        attn_scale: AttnScale::PerHead,
        embed_scale,
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn later_tokens_never_change_earlier_scores() {
    let model = Model::<f32>::init(small(EmbedScale::SqrtD), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let ids = random_ids(&mut rng, 12, 23);
        let base = model.forward(&ids, Mode::Eval).unwrap();
        let j = rng.random_range(1..12);
        let mut other = ids.clone();
        other[j] = (other[j] + 1) % 23;
        let changed = model.forward(&other, Mode::Eval).unwrap();
        assert_eq!(&base.data()[..j * 23], &changed.data()[..j * 23]);
        assert_ne!(&base.data()[j * 23..], &changed.data()[j * 23..]);
    }
}

#[test]
fn full_forward_matches_prefix_recomputation() {
    let model = Model::<f32>::init(small(EmbedScale::SqrtD), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let ids = random_ids(&mut rng, 12, 23);
        let full = model.forward(&ids, Mode::Eval).unwrap();
        for i in 0..ids.len() {
            let prefix = model.forward(&ids[..=i], Mode::Eval).unwrap();
            let last = prefix.row(i);
            let worst = last
                .iter()
                .zip(full.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(worst < 1e-5, "position {i}: {worst}");
        }
    }
}

#[test]
fn batched_forward_equals_single_sequences() {
    let model = Model::<f64>::init(small(EmbedScale::None), 5).unwrap();
    let a = [3u32, 7, 1, 9, 4];
    let b = [8u32, 8, 2, 0, 22];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward_on_tape(&mut tape, &bound, &[&a, &b], Mode::Eval).unwrap();
    let batched = tape.value(out);
    let sa = model.forward(&a, Mode::Eval).unwrap();
    let sb = model.forward(&b, Mode::Eval).unwrap();
    for (x, y) in batched.data().iter().zip(sa.data().iter().chain(sb.data())) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn entropy_at_init_is_near_uniform() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk(512)
    };
    let model = Model::<f64>::init(cfg, 7).unwrap();
    let ids: Vec<u32> = (0..64).map(|i| (i * 37 % 512) as u32).collect();
    let scores = model.forward(&ids, Mode::Eval).unwrap();
    let ln_v = 512f64.ln();
    for i in 0..64 {
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let h: f64 = row
            .iter()
            .map(|s| {
                let p = (s - max).exp() / z;
                -p * p.ln()
            })
            .sum();
        assert!((ln_v - h) / ln_v < 0.01, "position {i}: entropy {h}");
    }
}

/// With the attention and feed-forward output projections zeroed, each block
/// core contributes nothing and the residuals carry the normalized input:
/// Scores = LN(LN(...LN(x₀)))·Eᵀ.
#[test]
fn zeroed_block_outputs_reduce_to_normalized_embeddings() {
    let cfg = small(EmbedScale::SqrtD);
    let mut params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    for l in &mut params.layers {
        l.w_out = Tensor::zeros(l.w_out.shape().to_vec());
        l.ff_out = Tensor::zeros(l.ff_out.shape().to_vec());
    }
    let model = Model::new(cfg, params).unwrap();
    let ids = [4u32, 0, 19, 7];
    let scores = model.forward(&ids, Mode::Eval).unwrap();

    let d = cfg.d_model;
    let ln = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    };
    let e = &model.params().token_embedding;
    for (pos, &id) in ids.iter().enumerate() {
        let pe = ctrlkit::model::positional_embedding(pos, d);
        let mut x: Vec<f64> = e.row(id as usize).iter().zip(&pe).map(|(a, p)| a * (d as f64).sqrt() + p).collect();
        // Two layers, each with two layernorms, then the final one.
        for _ in 0..2 * cfg.n_layers + 1 {
            x = ln(&x);
        }
        for v in 0..cfg.vocab_size {
            let want: f64 = x.iter().zip(e.row(v)).map(|(a, b)| a * b).sum();
            assert!((scores.row(pos)[v] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn backward_reaches_every_parameter() {
    let cfg = small(EmbedScale::SqrtD);
    let model = Model::<f32>::init(cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let records: Vec<Vec<u32>> = (0..4).map(|_| random_ids(&mut rng, 12, 23)).collect();
    let refs: Vec<&[u32]> = records.iter().map(|r| r.as_slice()).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = model
        .loss_on_tape(&mut tape, &bound, &refs, Mode::Train { seed: 1, step: 0 })
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    let nonzero = bound
        .all
        .iter()
        .filter(|&&v| grads.get(v).is_some_and(|g| g.sum_squares() > 0.0))
        .count();
    assert!(nonzero as f64 >= 0.99 * bound.all.len() as f64, "{nonzero}/{}", bound.all.len());
}

#[test]
fn model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        dropout: 0.0,
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        vocab_size: 9,
        context: 5,
        ..small(EmbedScale::SqrtD)
    };
    let mut model = Model::<f64>::init(cfg, 15).unwrap();
    let records: [&[u32]; 2] = [&[1, 4, 2, 8, 3], &[2, 2, 7, 0, 6]];
    let loss_of = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let l = m.loss_on_tape(&mut tape, &b, &records, Mode::Eval).unwrap();
        tape.value(l).data()[0]
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let l = model.loss_on_tape(&mut tape, &b, &records, Mode::Eval).unwrap();
        let g = tape.backward(l).unwrap();
        b.all.iter().map(|&v| g.get(v).unwrap().data().to_vec()).collect()
    };
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = model.params().tensors()[p].data()[k];
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig + h;
            let up = loss_of(&model);
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig - h;
            let down = loss_of(&model);
            model.params_mut().tensors_mut()[p].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - grad[k]).powi(2);
            norm += fd * fd;
        }
    }
    assert!(diff.sqrt() / norm.sqrt() < 1e-6, "relative error {}", diff.sqrt() / norm.sqrt());
}

#[test]
fn training_updates_keep_projection_tied() {
    let cfg = small(EmbedScale::SqrtD);
    let model = Model::<f32>::init(cfg, 17).unwrap();
    let records = vec![ctrlkit::corpus::SequenceRecord {
        tokens: (0..12).map(|i| i % 23).collect(),
        domain: "x".into(),
    }];
    let mut trainer = ctrlkit::trainer::Trainer::new(
        model,
        ctrlkit::trainer::TrainConfig {
            batch_size: 1,
            warmup_steps: 0,
            ..Default::default()
        },
    )
    .unwrap();
    let before = trainer.model().params().token_embedding.clone();
    trainer.train_step(&records).unwrap();
    let p = trainer.model().params();
    assert_ne!(p.token_embedding, before);
    assert_eq!(p.output_projection(), &p.token_embedding);

    let ck = Checkpoint::<f32>::from_bytes(&trainer.checkpoint().to_bytes()).unwrap();
    assert_eq!(ck.params.output_projection(), &p.token_embedding);
}

#[test]
fn parameter_counts() {
    let desk = ModelConfig::desk(512);
    let params = ModelParams::<f32>::init(&desk, 0).unwrap();
    let walked: usize = params.tensors().iter().map(|t| t.numel()).sum();
    assert_eq!(count_params(&desk), walked as u64);

    let paper = ModelConfig {
        d_model: 1280,
        d_ff: 8192,
        n_layers: 48,
        n_heads: 16,
        vocab_size: 250_000,
        context: 256,
        ..desk
    };
    let n = count_params(&paper) as f64;
    assert!((1.5e9..1.8e9).contains(&n), "{n}");
}

#[test]
fn score_model_trait_matches_forward() {
    let model = Model::<f32>::init(small(EmbedScale::None), 19).unwrap();
    let ids = [1u32, 2, 3];
    let direct = model.forward(&ids, Mode::Eval).unwrap();
    let via = model.scores(&ids).unwrap();
    assert_eq!(via.shape(), &[3, 23]);
    for (a, b) in via.data().iter().zip(direct.data()) {
        assert_eq!(*a, *b as f64);
    }
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = ModelConfig::desk(512);
    assert_eq!(a.hash(), ModelConfig::desk(512).hash());
    assert_eq!(a.hash().len(), 64);
    assert_ne!(a.hash(), ModelConfig::desk(513).hash());
    assert_ne!(
        a.hash(),
        ModelConfig {
            embed_scale: EmbedScale::None,
            ..a
        }
        .hash()
    );
}
