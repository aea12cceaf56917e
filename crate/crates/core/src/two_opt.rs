//! 2-opt local search.
//!
//! Up to [`NEIGHBOR_LIST_THRESHOLD`] nodes the search scans every position
//! pair with first-improvement acceptance. Above it, moves are restricted to
//! the nearest neighbors of each node and driven by don't-look bits, in
//! which case convergence only certifies the pruned neighborhood.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::instance::{closed_length_unchecked, Tour, TspInstance};

/// Minimum gain for a move to count as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-10;
pub const NEIGHBOR_LIST_THRESHOLD: usize = 2000;
pub const NEIGHBOR_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TwoOptBudget {
    pub max_passes: Option<usize>,
    #[serde(skip)]
    pub time_limit: Option<Duration>,
}

impl TwoOptBudget {
    pub fn converge() -> Self {
        TwoOptBudget::default()
    }

    pub fn passes(n: usize) -> Self {
        TwoOptBudget { max_passes: Some(n), time_limit: None }
    }

    /// Run to convergence up to the neighbor-list threshold, one pass beyond.
    pub fn default_for(n: usize) -> Self {
        if n <= NEIGHBOR_LIST_THRESHOLD {
            TwoOptBudget::converge()
        } else {
            TwoOptBudget::passes(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoOptOutcome {
    pub tour: Tour,
    /// A full pass found no improving move.
    pub converged: bool,
    pub passes: usize,
    pub moves: usize,
}

pub fn two_opt(instance: &TspInstance, tour: &Tour, budget: TwoOptBudget) -> Tour {
    two_opt_detailed(instance, tour, budget).tour
}

pub fn two_opt_detailed(instance: &TspInstance, tour: &Tour, budget: TwoOptBudget) -> TwoOptOutcome {
    let n = tour.len();
    if n < 4 {
        return TwoOptOutcome { tour: tour.clone(), converged: true, passes: 0, moves: 0 };
    }
    let out = if n > NEIGHBOR_LIST_THRESHOLD {
        neighbor_two_opt(instance, tour, budget)
    } else {
        full_two_opt(instance, tour, budget)
    };
    // Float reassociation can make a sequence of accepted moves lengthen the
    // tour by a few ulps; never return something longer than the input.
    if closed_length_unchecked(instance, &out.tour.order) > closed_length_unchecked(instance, &tour.order) {
        return TwoOptOutcome { tour: tour.clone(), ..out };
    }
    out
}

fn out_of_budget(budget: &TwoOptBudget, passes: usize, start: Instant) -> bool {
    budget.max_passes.is_some_and(|p| passes >= p) || budget.time_limit.is_some_and(|t| start.elapsed() >= t)
}

fn full_two_opt(instance: &TspInstance, tour: &Tour, budget: TwoOptBudget) -> TwoOptOutcome {
    let start = Instant::now();
    let mut t = tour.order.clone();
    let n = t.len();
    let (mut passes, mut moves) = (0, 0);
    loop {
        if out_of_budget(&budget, passes, start) {
            return TwoOptOutcome { tour: Tour::new(t), converged: false, passes, moves };
        }
        passes += 1;
        let mut improved = false;
        for i in 0..n - 2 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (t[i], t[i + 1]);
                let (c, d) = (t[j], t[(j + 1) % n]);
                let delta = instance.cost(a, b) + instance.cost(c, d) - instance.cost(a, c) - instance.cost(b, d);
                if delta > IMPROVEMENT_EPS {
                    t[i + 1..=j].reverse();
                    improved = true;
                    moves += 1;
                }
            }
        }
        if !improved {
            return TwoOptOutcome { tour: Tour::new(t), converged: true, passes, moves };
        }
    }
}

/// `k` nearest neighbors of every node, ascending by distance then index.
pub fn nearest_neighbors(instance: &TspInstance, k: usize) -> Vec<Vec<usize>> {
    let n = instance.len();
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (instance.cost(i, j), j)).collect();
            let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < others.len() {
                others.select_nth_unstable_by(k, key);
                others.truncate(k);
            }
            others.sort_by(key);
            others.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

struct ArrayTour {
    order: Vec<usize>,
    pos: Vec<usize>,
}

impl ArrayTour {
    fn next(&self, v: usize) -> usize {
        self.order[(self.pos[v] + 1) % self.order.len()]
    }

    fn prev(&self, v: usize) -> usize {
        let n = self.order.len();
        self.order[(self.pos[v] + n - 1) % n]
    }

    /// Reverses the cyclic segment from position `i` to position `j`
    /// (inclusive), walking whichever side of the cycle is shorter.
    fn reverse(&mut self, i: usize, j: usize) {
        let n = self.order.len();
        let inner = (j + n - i) % n + 1;
        let (mut a, mut b, len) =
            if inner * 2 <= n { (i, j, inner) } else { ((j + 1) % n, (i + n - 1) % n, n - inner) };
        for _ in 0..len / 2 {
            self.order.swap(a, b);
            self.pos[self.order[a]] = a;
            self.pos[self.order[b]] = b;
            a = (a + 1) % n;
            b = (b + n - 1) % n;
        }
    }
}

fn neighbor_two_opt(instance: &TspInstance, tour: &Tour, budget: TwoOptBudget) -> TwoOptOutcome {
    let start = Instant::now();
    let n = tour.len();
    let neighbors = nearest_neighbors(instance, NEIGHBOR_COUNT);
    let mut pos = vec![0; n];
    for (i, &v) in tour.order.iter().enumerate() {
        pos[v] = i;
    }
    let mut t = ArrayTour { order: tour.order.clone(), pos };
    let mut active = vec![true; n];
    let (mut passes, mut moves) = (0, 0);
    loop {
        if out_of_budget(&budget, passes, start) {
            return TwoOptOutcome { tour: Tour::new(t.order), converged: false, passes, moves };
        }
        passes += 1;
        let mut improved = false;
        for idx in 0..n {
            let a = t.order[idx];
            if !active[a] {
                continue;
            }
            let mut found = false;
            'dirs: for forward in [true, false] {
                let b = if forward { t.next(a) } else { t.prev(a) };
                let ab = instance.cost(a, b);
                for &c in &neighbors[a] {
                    let ac = instance.cost(a, c);
                    if ac >= ab {
                        break;
                    }
                    let d = if forward { t.next(c) } else { t.prev(c) };
                    if c == b || d == a {
                        continue;
                    }
                    let delta = ab + instance.cost(c, d) - ac - instance.cost(b, d);
                    if delta > IMPROVEMENT_EPS {
                        if forward {
                            t.reverse(t.pos[b], t.pos[c]);
                        } else {
                            t.reverse(t.pos[c], t.pos[b]);
                        }
                        for v in [a, b, c, d] {
                            active[v] = true;
                        }
                        found = true;
                        moves += 1;
                        break 'dirs;
                    }
                }
            }
            if found {
                improved = true;
            } else {
                active[a] = false;
            }
        }
        if !improved {
            return TwoOptOutcome { tour: Tour::new(t.order), converged: true, passes, moves };
        }
    }
}
