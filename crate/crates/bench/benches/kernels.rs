use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use onion_core::gru::{self, GruParams};
use onion_core::taskgen::{sample_repeat_example, TaskConfig};
use onion_core::{DecodeMode, Feedback, Graph, Rng, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let mut rng = Rng::new(1);
        let a = Tensor::<f32>::normal(&[256, n], 0.0, 1.0, &mut rng);
        let b = Tensor::<f32>::normal(&[n, n], 0.0, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b))
        });
    }
    group.finish();
}

fn batch(n: usize) -> Vec<Vec<usize>> {
    let task = TaskConfig::desk();
    let mut rng = Rng::new(3);
    (0..n).map(|_| sample_repeat_example(&mut rng, &task).tokens).collect()
}

fn gru_step(c: &mut Criterion) {
    let seqs = batch(256);
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut group = c.benchmark_group("gru_batch_256");
    group.sample_size(20);
    for n in [64usize, 128] {
        let params = GruParams::<f32>::init(n, 30, &mut Rng::new(2));
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let v = params.bind(&mut g, false);
                let d = gru::batch_loss(&mut g, &v, &refs, DecodeMode::Autoregressive, Feedback::TeacherForced);
                g.scalar(d.loss.unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let v = params.bind(&mut g, true);
                let d = gru::batch_loss(&mut g, &v, &refs, DecodeMode::Autoregressive, Feedback::TeacherForced);
                g.forward_backward(d.loss.unwrap()).unwrap().0
            })
        });
        group.bench_with_input(BenchmarkId::new("exact_match_1000", n), &n, |bench, _| {
            let examples: Vec<_> = seqs
                .iter()
                .cycle()
                .take(1000)
                .map(|s| onion_core::RepeatExample::new(s.clone()))
                .collect();
            bench.iter(|| gru::exact_match(&params, &examples, DecodeMode::Autoregressive).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, gru_step);
criterion_main!(benches);
