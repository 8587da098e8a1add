use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use wmguard_core::par;
use wmguard_core::pushsim::{rollout, EnvParams};
use wmguard_core::scorers::{score_trajectory, Scorer};
use wmguard_core::trajkit::Mode;

fn plan(n: u64) -> Vec<(u64, Mode)> {
    (0..n).map(|i| (i, Mode::FAILURES[i as usize % 4])).collect()
}

fn rollouts(c: &mut Criterion) {
    let env = EnvParams::default();
    let seeds = plan(16);
    let mut g = c.benchmark_group("rollouts");
    g.sample_size(10);
    g.bench_function("seq", |b| b.iter(|| par::map_seq(black_box(&seeds), |&(s, m)| rollout(s, m, &env))));
    #[cfg(feature = "parallel")]
    g.bench_function("par", |b| b.iter(|| par::map_par(black_box(&seeds), |&(s, m)| rollout(s, m, &env))));
    g.finish();
}

fn sparc_scoring(c: &mut Criterion) {
    let env = EnvParams::default();
    let trajs: Vec<_> = plan(16).iter().map(|&(s, m)| rollout(s, m, &env)).collect();
    let scorer = Scorer::Sparc;
    let mut g = c.benchmark_group("sparc_scoring");
    g.sample_size(10);
    g.bench_function("seq", |b| b.iter(|| par::map_seq(black_box(&trajs), |t| score_trajectory(&scorer, t).unwrap())));
    #[cfg(feature = "parallel")]
    g.bench_function("par", |b| b.iter(|| par::map_par(black_box(&trajs), |t| score_trajectory(&scorer, t).unwrap())));
    g.finish();
}

criterion_group!(benches, rollouts, sparc_scoring);
criterion_main!(benches);
