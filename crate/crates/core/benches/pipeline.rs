use criterion::{criterion_group, criterion_main, Criterion};

use pairalign::detector::{propose_and_detect, DetectorConfig, DetectorParams};
use pairalign::numerics::{Concern, RngStream};
use pairalign::par;
use pairalign::synthgen::{generate_benchmark, SynthConfig};

fn detect_all(c: &mut Criterion) {
    let data = generate_benchmark(
        &SynthConfig {
            scenes: 32,
            ..SynthConfig::default()
        },
        7,
    )
    .expect("benchmark data");
    let mut rng = RngStream::for_concern(7, Concern::Init, 0);
    let params = DetectorParams::init(DetectorConfig::default(), &mut rng).expect("init");

    let mut group = c.benchmark_group("detect_target_set");
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        group.bench_function(label, |b| {
            par::set_sequential(sequential);
            b.iter(|| {
                par::map(&data.target, |s| {
                    propose_and_detect(&s.image, &params, 0.0, 0.5).expect("detect")
                })
            });
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, detect_all);
criterion_main!(benches);
