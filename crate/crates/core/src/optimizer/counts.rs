//! Bounded change-making: pick instance counts so that
//! `sum(count_i * batch_i) == total` with the fewest instances.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountItem {
    pub batch: u64,
    pub quota: u32,
    /// Tie-break between decompositions with equal instance totals.
    pub price: f64,
}

#[derive(Clone, Copy)]
struct Cell {
    n: u64,
    cost: f64,
}

fn better(a: Cell, b: Option<Cell>) -> bool {
    match b {
        None => true,
        Some(b) => a.n < b.n || (a.n == b.n && a.cost < b.cost),
    }
}

/// Exact minimizer of the total instance count, ties broken by total price.
/// Returns `None` when no decomposition with `count_i <= quota_i` exists.
pub fn solve_counts(items: &[CountItem], total: u64) -> Option<Vec<u32>> {
    let width = total as usize + 1;
    let mut best: Vec<Option<Cell>> = vec![None; width];
    best[0] = Some(Cell { n: 0, cost: 0.0 });
    let mut choice: Vec<Vec<u32>> = Vec::with_capacity(items.len());
    for item in items {
        let mut next: Vec<Option<Cell>> = vec![None; width];
        let mut pick = vec![0u32; width];
        for s in 0..width {
            let max_k = if item.batch == 0 {
                0
            } else {
                (s as u64 / item.batch).min(item.quota as u64)
            };
            for k in 0..=max_k {
                let Some(prev) = best[s - (k * item.batch) as usize] else {
                    continue;
                };
                let cand = Cell {
                    n: prev.n + k,
                    cost: prev.cost + k as f64 * item.price,
                };
                if better(cand, next[s]) {
                    next[s] = Some(cand);
                    pick[s] = k as u32;
                }
            }
        }
        best = next;
        choice.push(pick);
    }
    best[total as usize]?;
    let mut counts = vec![0u32; items.len()];
    let mut s = total as usize;
    for (i, item) in items.iter().enumerate().rev() {
        let k = choice[i][s];
        counts[i] = k;
        s -= (k as u64 * item.batch) as usize;
    }
    Some(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(batch: u64, quota: u32, price: f64) -> CountItem {
        CountItem { batch, quota, price }
    }

    #[test]
    fn prefers_fewer_instances() {
        let c = solve_counts(&[item(64, 2, 1.0), item(128, 2, 1.0)], 256);
        assert_eq!(c, Some(vec![0, 2]));
    }

    #[test]
    fn forced_single_type() {
        assert_eq!(solve_counts(&[item(64, 4, 1.0)], 256), Some(vec![4]));
        assert_eq!(solve_counts(&[item(64, 3, 1.0)], 256), None);
    }

    #[test]
    fn no_exact_sum() {
        assert_eq!(solve_counts(&[item(64, 8, 1.0), item(128, 8, 1.0)], 100), None);
    }

    #[test]
    fn cheaper_wins_ties() {
        let c = solve_counts(&[item(128, 2, 3.0), item(128, 2, 1.0)], 256);
        assert_eq!(c, Some(vec![0, 2]));
    }

    #[test]
    fn zero_total() {
        assert_eq!(solve_counts(&[item(64, 2, 1.0)], 0), Some(vec![0]));
    }
}
