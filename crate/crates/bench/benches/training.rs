use criterion::{criterion_group, criterion_main, Criterion};
use dragflow_core::grpo::{ControlSet, GrpoConfig, GrpoTrainer};
use dragflow_core::rewards::RewardRegistry;
use dragflow_core::scene::{SceneClip, TrajectoryFamily};
use dragflow_core::teacher::teacher_train_step;
use dragflow_core::{AdamW, MaskMode, NetConfig, VelocityNet};

fn clips(n: usize) -> Vec<SceneClip> {
    (0..n).map(|i| SceneClip::generate(TrajectoryFamily::Line, 15, 16, i as u64).unwrap()).collect()
}

fn teacher_step(c: &mut Criterion) {
    let mut net = VelocityNet::new(NetConfig::default(), MaskMode::Bidirectional, 1).unwrap();
    let opt = AdamW::with_lr(1e-3);
    let clips = clips(8);
    let refs: Vec<&SceneClip> = clips.iter().collect();
    let mut step = 0;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("teacher flow-matching step, batch 8", |b| {
        b.iter(|| {
            step += 1;
            teacher_train_step(&mut net, &opt, &refs, 0, step).unwrap()
        })
    });
    g.finish();
}

fn grpo_iteration(c: &mut Criterion) {
    let net = VelocityNet::new(NetConfig::default(), MaskMode::Causal, 1).unwrap();
    let cfg = GrpoConfig { group: 8, groups_per_iter: 2, ..GrpoConfig::default() };
    let mut trainer = GrpoTrainer::new(net, cfg, &RewardRegistry::default()).unwrap();
    let sets: Vec<ControlSet> = clips(2).iter().enumerate().map(|(i, c)| ControlSet::for_clip(c, 0, &[i as u64]).unwrap()).collect();
    let mut it = 0;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("grpo iteration, 2 groups of 8", |b| {
        b.iter(|| {
            it += 1;
            trainer.iteration(&sets, it).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, teacher_step, grpo_iteration);
criterion_main!(benches);
