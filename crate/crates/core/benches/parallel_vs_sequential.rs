use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use farebench::dataset::ColumnTable;
use farebench::gat::{build_graph, GraphConfig};
use farebench::gbdt::{fit, FeatureMatrix, GbdtConfig};
use farebench::preprocess::{add_haversine, knn_impute, KnnImputeConfig};
use farebench::{par, synth};

fn trips(n: usize) -> ColumnTable {
    let mut t = synth::deterministic_fare_table(n, 1).unwrap();
    add_haversine(&mut t).unwrap();
    t
}

/// Every fifth passenger count knocked out, so a fifth of rows need donors.
fn with_gaps(t: &ColumnTable) -> ColumnTable {
    let mut cols: Vec<Vec<f64>> = t.columns().to_vec();
    let pc = t.index_of("passenger_count").unwrap();
    for (i, v) in cols[pc].iter_mut().enumerate() {
        if i % 5 == 0 {
            *v = f64::NAN;
        }
    }
    ColumnTable::from_columns(t.names().to_vec(), cols).unwrap()
}

fn modes(c: &mut Criterion, group: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            par::set_sequential(sequential);
            b.iter(&mut f);
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_knn(c: &mut Criterion) {
    let t = with_gaps(&trips(3000));
    let cfg = KnnImputeConfig::default();
    modes(c, "knn_impute_3k", || {
        knn_impute(&t, "passenger_count", &cfg).unwrap();
    });
}

fn bench_gbdt(c: &mut Criterion) {
    let t = trips(20_000);
    let names = ["pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude", "haversine_km"];
    let x = FeatureMatrix::from_columns(names.iter().map(|n| t.column(n).unwrap().to_vec()).collect()).unwrap();
    let y = t.column("fare_amount").unwrap().to_vec();
    let cfg = GbdtConfig { n_rounds: 30, ..GbdtConfig::default() };
    modes(c, "gbdt_fit_20k_30_rounds", || {
        fit(&x, &y, &x, &y, &cfg).unwrap();
    });
}

fn bench_graph(c: &mut Criterion) {
    let t = trips(20_000);
    let names = ["pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude", "haversine_km"];
    let cfg = GraphConfig::default();
    modes(c, "graph_build_20k", || {
        build_graph(&t, &names, &cfg).unwrap();
    });
}

criterion_group!(benches, bench_knn, bench_gbdt, bench_graph);
criterion_main!(benches);
