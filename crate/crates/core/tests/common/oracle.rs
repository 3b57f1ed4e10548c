//! Brute-force metric definitions, written independently of the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rank of item `i` by counting everything that sorts before it.
pub fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn oracle_ap(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let mut pos: Vec<(usize, usize)> = (0..scores.len())
        .filter(|&i| targets[i])
        .map(|i| (rank_of(scores, i), i))
        .collect();
    if pos.is_empty() {
        return None;
    }
    pos.sort();
    let mut total = 0.0;
    for &(rank, _) in &pos {
        let hits = pos.iter().filter(|&&(r, _)| r <= rank).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / pos.len() as f64)
}

pub struct Oracle {
    pub c_p: f64,
    pub c_r: f64,
    pub o_p: f64,
    pub o_r: f64,
    pub c_ap: Option<f64>,
    pub o_ap: Option<f64>,
}

pub fn oracle(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Oracle {
    let n = probs.len();
    let c = probs[0].len();
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut sp, mut sr) = (0.0, 0.0);
    let (mut tc, mut tp, mut tg) = (0, 0, 0);
    let mut aps = Vec::new();
    for k in 0..c {
        let predicted: Vec<usize> = (0..n).filter(|&i| probs[i][k] > 0.5).collect();
        let truth: Vec<usize> = (0..n).filter(|&i| targets[i][k] == 1.0).collect();
        let correct = predicted.iter().filter(|i| truth.contains(i)).count();
        sp += div(correct, predicted.len());
        sr += div(correct, truth.len());
        tc += correct;
        tp += predicted.len();
        tg += truth.len();
        let col: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let t: Vec<bool> = targets.iter().map(|r| r[k] == 1.0).collect();
        if let Some(ap) = oracle_ap(&col, &t) {
            aps.push(ap);
        }
    }
    let flat: Vec<f64> = probs.concat();
    let flat_t: Vec<bool> = targets.concat().iter().map(|&y| y == 1.0).collect();
    Oracle {
        c_p: sp / c as f64,
        c_r: sr / c as f64,
        o_p: div(tc, tp),
        o_r: div(tc, tg),
        c_ap: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        o_ap: oracle_ap(&flat, &flat_t),
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = rng.random_range(1..=10);
    let c = rng.random_range(1..=5);
    // A coarse score grid forces ties and exact-threshold hits.
    let probs = (0..n)
        .map(|_| {
            (0..c)
                .map(|_| rng.random_range(0..=10) as f64 / 10.0)
                .collect()
        })
        .collect();
    let targets = (0..n)
        .map(|_| (0..c).map(|_| rng.random_bool(0.4) as u8 as f64).collect())
        .collect();
    (probs, targets)
}
