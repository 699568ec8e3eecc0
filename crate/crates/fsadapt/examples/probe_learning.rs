//! Scratch probe for tuning.

use fsadapt::adapt::{adapt, HeadSpec, TrainConfig};
use fsadapt::encoder::{build_encoder, EncoderConfig, FreezePolicy, StageConfig};
use fsadapt::eval::{mean_auc, report_from_scores};
use fsadapt::semantic::AlignmentHeadConfig;
use fsadapt::taskgen::{generate_task, paired_semantics, preset};
use fsadapt::tensor::Tensor;

fn default_encoder(seed: u64) -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        patch_size: 8,
        channels: 1,
        stages: vec![
            StageConfig { num_blocks: 1, width: 32 },
            StageConfig { num_blocks: 1, width: 32 },
            StageConfig { num_blocks: 1, width: 32 },
            StageConfig { num_blocks: 1, width: 32 },
        ],
        heads: 4,
        output_dim: 32,
        seed,
    }
}

fn embed_all(enc: &fsadapt::encoder::Encoder, items: &[fsadapt::taskgen::TaskItem]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in items.chunks(32) {
        let mut data = Vec::new();
        for it in chunk {
            data.extend_from_slice(it.image.data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, 32, 32], data).unwrap();
        let emb = enc.forward(&batch).unwrap();
        for r in 0..chunk.len() {
            out.push(emb.data()[r * 32..(r + 1) * 32].to_vec());
        }
    }
    out
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (na * nb)
}

fn main() {
    let spec = preset("easy", 1).unwrap();
    let task = generate_task(&spec).unwrap();
    let n = spec.n_classes;

    // 1. Separability of the frozen random encoder's embeddings:
    //    class-mean prototypes from support, cosine scores on query.
    let enc = build_encoder(default_encoder(7)).unwrap();
    let support_emb = embed_all(&enc, &task.support);
    let query_emb = embed_all(&enc, &task.query);
    let mut protos = vec![vec![0.0; 32]; n];
    let mut counts = vec![0usize; n];
    for (item, emb) in task.support.iter().zip(support_emb.iter()) {
        for c in 0..n {
            if item.labels[c] == 1 {
                for (p, e) in protos[c].iter_mut().zip(emb.iter()) {
                    *p += e;
                }
                counts[c] += 1;
            }
        }
    }
    for c in 0..n {
        for p in protos[c].iter_mut() {
            *p /= counts[c] as f64;
        }
    }
    let scores: Vec<Vec<f64>> = query_emb
        .iter()
        .map(|e| protos.iter().map(|p| cos(e, p)).collect())
        .collect();
    let labels: Vec<Vec<u8>> = task.query.iter().map(|i| i.labels.clone()).collect();
    let proto_report = report_from_scores(&scores, &labels, serde_json::Value::Null).unwrap();
    println!("frozen-encoder prototype mAUC: {:.4}", proto_report.mauc);

    // Also raw-pixel prototypes as the ceiling reference.
    let mut pprotos = vec![vec![0.0; 1024]; n];
    let mut pcounts = vec![0usize; n];
    for item in &task.support {
        for c in 0..n {
            if item.labels[c] == 1 {
                for (p, e) in pprotos[c].iter_mut().zip(item.image.data()) {
                    *p += e;
                }
                pcounts[c] += 1;
            }
        }
    }
    for c in 0..n {
        for p in pprotos[c].iter_mut() {
            *p /= pcounts[c] as f64;
        }
    }
    let pscores: Vec<Vec<f64>> = task
        .query
        .iter()
        .map(|i| pprotos.iter().map(|p| cos(i.image.data(), p)).collect())
        .collect();
    let praw = report_from_scores(&pscores, &labels, serde_json::Value::Null).unwrap();
    println!("raw-pixel prototype mAUC: {:.4}", praw.mauc);

    // 2. Gradient sanity: can a big learning rate learn through the full
    //    pipeline?
    for lr in [1e-4, 1e-3, 1e-2] {
        let pair = paired_semantics(&spec, 16, 1).unwrap();
        let mut enc = build_encoder(default_encoder(7)).unwrap();
        enc.apply_freeze(FreezePolicy::default()).unwrap();
        let train_cfg = TrainConfig {
            learning_rate: lr,
            ..TrainConfig::default_with(1, 32)
        };
        let (model, history) = adapt(
            &task,
            enc,
            HeadSpec::Semantic {
                sets: pair.context,
                cfg: AlignmentHeadConfig::default(),
            },
            &train_cfg,
            false,
        )
        .unwrap();
        let report = mean_auc(&model, &task.query, serde_json::Value::Null).unwrap();
        println!(
            "lr {lr:.0e}: mAUC {:.4}; loss {:.4} -> {:.4}",
            report.mauc,
            history.epochs.first().unwrap().mean_loss,
            history.epochs.last().unwrap().mean_loss,
        );
    }
}
