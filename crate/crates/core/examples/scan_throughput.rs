//! Measures exact-scan throughput of a gallery index at Dout = 256.
//!
//! Run with `cargo run --release --example scan_throughput [N] [queries]`.

use std::time::Instant;

use compsearch::index::{Fingerprint, GalleryIndex, IndexHeader};
use compsearch::model::SPATIAL;
use compsearch::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let n = args.next().unwrap_or(5000);
    let queries = args.next().unwrap_or(20);
    let dout = 256;
    let dim = SPATIAL * SPATIAL * dout;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let header = IndexHeader {
        fingerprint: Fingerprint {
            checkpoint_hash: "throughput".into(),
            dout,
            categories: 80,
        },
        n,
        dim,
        ids: (0..n).map(|i| format!("g{i:07}")).collect(),
        annotations: None,
        checkpoint: None,
    };
    let index =
        GalleryIndex::new(header, Tensor::new([n, dim], data).expect("dims")).expect("index");
    let qs: Vec<Vec<f32>> = (0..queries)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let start = Instant::now();
    for q in &qs {
        std::hint::black_box(index.search(q, 10).expect("search"));
    }
    let secs = start.elapsed().as_secs_f64();
    let dots = (n * queries) as f64;
    let threads = rayon::current_num_threads();
    println!(
        "N {n}, L {dim}, {queries} queries, {threads} thread(s): {:.0} dot products/s ({:.0} per thread), {:.2} GFLOP/s, {:.1} ms per query",
        dots / secs,
        dots / secs / threads as f64,
        2.0 * dots * dim as f64 / secs / 1e9,
        secs * 1e3 / queries as f64
    );
}
