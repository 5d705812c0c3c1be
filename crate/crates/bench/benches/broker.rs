use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use silmesh_bench::{french, library};

fn broadcast(c: &mut Criterion) {
    let mut g = c.benchmark_group("broadcast_drain");
    g.sample_size(20);
    for servers in [1usize, 4, 8] {
        let mesh = library(servers, 300);
        let sids: Vec<String> = (0..servers).map(|i| format!("srv{i}")).collect();
        for page in [10u32, 100] {
            g.bench_with_input(BenchmarkId::new(format!("{servers}srv"), page), &page, |b, &page| {
                let mut client = mesh.connect("srv0", "reader").unwrap();
                client.choose_servers(&sids).unwrap();
                client.set_page_size(page);
                b.iter(|| client.query_all(&french()).unwrap().len())
            });
        }
    }
    g.finish();
}

fn count(c: &mut Criterion) {
    let mesh = library(4, 300);
    let sids: Vec<String> = (0..4).map(|i| format!("srv{i}")).collect();
    let mut client = mesh.connect("srv0", "reader").unwrap();
    client.choose_servers(&sids).unwrap();
    c.bench_function("count_4srv", |b| b.iter(|| client.count(&french()).unwrap().count));
}

criterion_group!(benches, broadcast, count);
criterion_main!(benches);
