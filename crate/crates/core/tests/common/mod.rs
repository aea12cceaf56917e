#![allow(dead_code)]

use std::path::PathBuf;

use localescape::instance::TspInstance;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Exact optimum over all tours starting at node 0.
pub fn brute_force_optimum(inst: &TspInstance) -> f64 {
    let n = inst.len();
    if n <= 3 {
        return (0..n).map(|i| inst.cost(i, (i + 1) % n)).sum();
    }
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut rest, 0, &mut |p| {
        let mut total = inst.cost(0, p[0]) + inst.cost(p[p.len() - 1], 0);
        for w in p.windows(2) {
            total += inst.cost(w[0], w[1]);
        }
        best = best.min(total);
    });
    best
}

fn permute(xs: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == xs.len() {
        visit(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permute(xs, k + 1, visit);
        xs.swap(k, i);
    }
}
