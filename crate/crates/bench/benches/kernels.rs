use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mdssl_core::data::{generate, CorpusSpec, Split};
use mdssl_core::encoder::{encode, encode_grad, Activation, EncoderDims, EncoderParams, Segment};
use mdssl_core::eval::{eer, min_dcf, ScoreRecord};
use mdssl_core::losses::{combined_loss, LossConfig};
use mdssl_core::numerics::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vector> {
    (0..n).map(|_| Vector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect()
}

fn bench_losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (48, 16);
    let q = random_vectors(&mut rng, n, d);
    let k = random_vectors(&mut rng, n, d);
    let domains: Vec<usize> = (0..n).map(|i| i % 6).collect();
    let cfg = LossConfig { use_bank: false, ..LossConfig::default() };
    c.bench_function("combined_loss_48x16", |b| {
        b.iter(|| combined_loss(black_box(&q), black_box(&k), &domains, &cfg, None).unwrap())
    });
}

fn bench_encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = EncoderParams::random(EncoderDims::default(), Activation::Tanh, &mut rng).unwrap();
    let frames: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let seg = Segment { frames: Matrix::from_rows(&frames).unwrap(), utterance_id: 0, domain_id: 0 };
    let upstream = vec![0.1; 16];
    c.bench_function("encode_30_frames", |b| b.iter(|| encode(black_box(&p), black_box(&seg)).unwrap()));
    c.bench_function("encode_grad_30_frames", |b| {
        b.iter(|| encode_grad(black_box(&p), black_box(&seg), &upstream).unwrap())
    });
    let corpus = generate(&CorpusSpec::default()).unwrap();
    let eval = corpus.utterances_in(Split::Eval);
    c.bench_function("encode_eval_split", |b| {
        b.iter(|| eval.iter().map(|u| encode(&p, &u.as_segment()).unwrap()).collect::<Vec<_>>())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<ScoreRecord> = (0..20_000)
        .map(|i| {
            let is_target = i % 10 == 0;
            let shift = if is_target { 1.0 } else { 0.0 };
            ScoreRecord { score: rng.random_range(-1.0..1.0) + shift, is_target }
        })
        .collect();
    c.bench_function("eer_20k", |b| b.iter(|| eer(black_box(&scores)).unwrap()));
    c.bench_function("min_dcf_20k", |b| b.iter(|| min_dcf(black_box(&scores), 0.05, 1.0, 1.0).unwrap()));
}

criterion_group!(benches, bench_losses, bench_encoder, bench_metrics);
criterion_main!(benches);
