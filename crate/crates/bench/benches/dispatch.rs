use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};

use pilotkit::protocol::{decode, encode, Assign, Message, TaskRequest};
use pilotkit::workload_manager::{DispatchConfig, MatchOutcome, WorkloadManager};
use pilotkit::{validate_workload, EventLog, TaskSpec};
use pilotkit_bench::{bag_of_tasks, FixedPilots};

fn drain_queue(c: &mut Criterion) {
    let mut group = c.benchmark_group("match_request");
    for n in [100usize, 1_000, 10_000] {
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let pilots = FixedPilots::active(4, 1 << 20);
            b.iter_batched(
                || {
                    let mut wm = WorkloadManager::new(DispatchConfig::default());
                    let mut log = EventLog::new();
                    let w = validate_workload(bag_of_tasks("w", n)).unwrap();
                    wm.submit_workload(w, &pilots, 0.0, &mut log).unwrap();
                    (wm, log)
                },
                |(mut wm, mut log)| {
                    let mut assigned = 0;
                    for i in 0..n {
                        let req = TaskRequest {
                            pilot_id: format!("p{}", i % 4),
                            free_cores: 1,
                        };
                        if let MatchOutcome::Assign(_) = wm.match_request(&req, &pilots, 1.0, 1.0, &mut log).unwrap() {
                            assigned += 1;
                        }
                    }
                    assert_eq!(assigned, n);
                    log
                },
                BatchSize::LargeInput,
            );
        });
    }
    group.finish();
}

fn codec(c: &mut Criterion) {
    let msg = Message::Assign(Assign {
        task: TaskSpec::new("t-000123", "/usr/bin/env", 2, 37.5),
        attempt: 1,
    });
    let frame = encode(&msg);
    let mut group = c.benchmark_group("protocol");
    group.throughput(Throughput::Bytes(frame.len() as u64));
    group.bench_function("encode", |b| b.iter(|| encode(std::hint::black_box(&msg))));
    group.bench_function("decode", |b| b.iter(|| decode(std::hint::black_box(&frame)).unwrap()));
    group.finish();
}

criterion_group!(benches, drain_queue, codec);
criterion_main!(benches);
