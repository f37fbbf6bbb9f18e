//! Stratified mini-batch planning by iterative stratification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Partitions `0..labels.len()` into batches of `batch_size` (the last may be
/// short) so that each batch's class counts track dataset prevalence.
///
/// Labels are processed rarest first. Every example carrying the current label
/// goes to the batch with the largest remaining demand for that label, rounded
/// to whole examples; ties go to the batch that most wants the example's other
/// labels, then to spare capacity, then to a seeded shuffle. Examples with no
/// positive label fill whatever capacity is left. The batch order is shuffled.
pub fn stratified_batches<L: AsRef<[bool]>>(
    labels: &[L],
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let k = labels.iter().map(|l| l.as_ref().len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = n.div_ceil(batch_size);
    let mut capacity: Vec<usize> = (0..nb)
        .map(|b| batch_size.min(n - b * batch_size))
        .collect();

    let is_pos = |i: usize, c: usize| labels[i].as_ref().get(c).copied().unwrap_or(false);
    let totals: Vec<usize> = (0..k)
        .map(|c| (0..n).filter(|&i| is_pos(i, c)).count())
        .collect();
    // desired[b][c]: expected positives of class c still owed to batch b.
    let mut desired: Vec<Vec<f64>> = capacity
        .iter()
        .map(|&cap| {
            totals
                .iter()
                .map(|&t| t as f64 * cap as f64 / n as f64)
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assigned = vec![false; n];
    let mut remaining_pos = totals.clone();
    let mut batches: Vec<Vec<usize>> = capacity.iter().map(|&c| Vec::with_capacity(c)).collect();
    let mut tie_rank: Vec<usize> = (0..nb).collect();
    tie_rank.shuffle(&mut rng);

    let mut place = |i: usize,
                     b: usize,
                     capacity: &mut Vec<usize>,
                     desired: &mut Vec<Vec<f64>>,
                     remaining_pos: &mut Vec<usize>,
                     assigned: &mut Vec<bool>| {
        batches[b].push(i);
        capacity[b] -= 1;
        assigned[i] = true;
        for c in 0..k {
            if is_pos(i, c) {
                desired[b][c] -= 1.0;
                remaining_pos[c] -= 1;
            }
        }
    };

    // Demand in whole examples, so near-equal demands fall back to spare capacity.
    let owed = |d: f64| (d + 0.5).floor() as i64;
    // What batch b still wants of every label example i carries.
    let co_demand = |i: usize, b: usize, desired: &Vec<Vec<f64>>| -> f64 {
        (0..k)
            .filter(|&d| is_pos(i, d))
            .map(|d| desired[b][d])
            .sum()
    };
    loop {
        let label = (0..k)
            .filter(|&c| remaining_pos[c] > 0)
            .min_by_key(|&c| (remaining_pos[c], c));
        let Some(c) = label else { break };
        for &i in &order {
            if assigned[i] || !is_pos(i, c) {
                continue;
            }
            let b = (0..nb)
                .filter(|&b| capacity[b] > 0)
                .max_by(|&x, &y| {
                    owed(desired[x][c])
                        .cmp(&owed(desired[y][c]))
                        .then(co_demand(i, x, &desired).total_cmp(&co_demand(i, y, &desired)))
                        .then(capacity[x].cmp(&capacity[y]))
                        .then(desired[x][c].total_cmp(&desired[y][c]))
                        .then(tie_rank[y].cmp(&tie_rank[x]))
                })
                .expect("total capacity equals example count");
            place(
                i,
                b,
                &mut capacity,
                &mut desired,
                &mut remaining_pos,
                &mut assigned,
            );
        }
    }
    for &i in &order {
        if assigned[i] {
            continue;
        }
        let b = (0..nb)
            .filter(|&b| capacity[b] > 0)
            .max_by(|&x, &y| {
                capacity[x]
                    .cmp(&capacity[y])
                    .then(tie_rank[y].cmp(&tie_rank[x]))
            })
            .expect("total capacity equals example count");
        place(
            i,
            b,
            &mut capacity,
            &mut desired,
            &mut remaining_pos,
            &mut assigned,
        );
    }
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(batches: &[Vec<usize>]) -> Vec<usize> {
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    #[test]
    fn partition_and_exact_counts() {
        // 30 of 100 positive, batch 10: exactly 3 per batch on average.
        let labels: Vec<[bool; 1]> = (0..100).map(|i| [i % 10 < 3]).collect();
        let batches = stratified_batches(&labels, 10, 5);
        assert_eq!(batches.len(), 10);
        assert_eq!(sorted(&batches), (0..100).collect::<Vec<_>>());
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i][0]).count(), 3);
        }
    }

    #[test]
    fn single_class_all_positive() {
        let labels = vec![[true]; 23];
        let batches = stratified_batches(&labels, 4, 1);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 23);
        assert!(batches.iter().flatten().all(|&i| labels[i][0]));
    }

    #[test]
    fn unlabeled_examples_fill_capacity() {
        let labels = vec![[false, false]; 7];
        let batches = stratified_batches(&labels, 3, 2);
        let mut sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 3, 3]);
    }

    #[test]
    fn deterministic_under_seed() {
        let labels: Vec<[bool; 3]> = (0..50)
            .map(|i| [i % 3 == 0, i % 7 == 0, i % 2 == 0])
            .collect();
        assert_eq!(
            stratified_batches(&labels, 8, 9),
            stratified_batches(&labels, 8, 9)
        );
    }
}
