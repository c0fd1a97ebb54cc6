use std::hint::black_box;

use carbon_ledger::operational::{
    parse_energy_log_str, sum_process_energy, ParseOptions, ProcessFilter,
};
use carbon_ledger::report::{build_report, render_report, ReportFormat};
use carbon_ledger::tokens::{scan_corpus, Direction};
use carbon_ledger::{CarbonIntensityValue, EnergyQuantity};
use carbon_ledger_bench::{energy_log_csv, write_corpus};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn log_parse(c: &mut Criterion) {
    let mut g = c.benchmark_group("energy_log");
    for rows in [1_000, 50_000] {
        let csv = energy_log_csv(rows);
        g.throughput(Throughput::Bytes(csv.len() as u64));
        g.bench_with_input(BenchmarkId::new("parse", rows), &csv, |b, csv| {
            b.iter(|| {
                parse_energy_log_str(black_box(csv), "bench.csv", &ParseOptions::default()).unwrap()
            })
        });
        let log = parse_energy_log_str(&csv, "bench.csv", &ParseOptions::default()).unwrap();
        let filter = ProcessFilter::any_of(["java*", "node.exe"]).unwrap();
        g.bench_with_input(BenchmarkId::new("sum", rows), &log, |b, log| {
            b.iter(|| sum_process_energy(black_box(log), &filter).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("to_csv", rows), &log, |b, log| {
            b.iter(|| log.to_csv())
        });
    }
    g.finish();
}

fn corpus_scan(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 500, 400).unwrap();
    c.bench_function("scan_corpus/500x400", |b| {
        b.iter(|| scan_corpus(dir.path(), &["*.txt"], Direction::Input).unwrap())
    });
}

fn report_render(c: &mut Criterion) {
    let r = build_report(
        EnergyQuantity::from_kwh(9.203).unwrap(),
        EnergyQuantity::from_kwh(1.131).unwrap(),
        CarbonIntensityValue::from_g_per_kwh(172.0).unwrap(),
    );
    let mut g = c.benchmark_group("report");
    for f in [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Table,
        ReportFormat::Markdown,
    ] {
        g.bench_function(format!("{f:?}"), |b| {
            b.iter(|| render_report(black_box(&r), f))
        });
    }
    g.finish();
}

criterion_group!(benches, log_parse, corpus_scan, report_render);
criterion_main!(benches);
