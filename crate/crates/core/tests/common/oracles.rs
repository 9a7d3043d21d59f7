//! Deliberately naive reference implementations used to cross-check the
//! library. They favour obviousness over speed and share no code with it.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

/// Metrics at 10 from first principles: `list` holds gold-membership flags
/// per rank (already deduplicated), `gold` the gold set size.
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ndcg: f64,
}

pub fn metrics(list: &[Option<u32>], gold: &HashSet<u32>) -> Metrics {
    let mut counted: Vec<u32> = Vec::new();
    let mut dcg = 0.0;
    for (i, id) in list.iter().enumerate().take(10) {
        if let Some(id) = id {
            if gold.contains(id) && !counted.contains(id) {
                counted.push(*id);
                // rank r = i + 1 gets gain 1 / log2(r + 1)
                dcg += std::f64::consts::LN_2 / ((i + 2) as f64).ln();
            }
        }
    }
    let mut idcg = 0.0;
    for i in 0..gold.len().min(10) {
        idcg += std::f64::consts::LN_2 / ((i + 2) as f64).ln();
    }
    let hits = counted.len() as f64;
    let precision = hits / 10.0;
    let recall = hits / gold.len() as f64;
    let f1 = if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        precision,
        recall,
        f1,
        ndcg: dcg / idcg,
    }
}

/// Longest common block by exhaustive search: earliest start in `a`, then
/// in `b`, wins ties.
fn longest(a: &[char], b: &[char], alo: usize, ahi: usize, blo: usize, bhi: usize) -> (usize, usize, usize) {
    let mut best = (alo, blo, 0);
    for i in alo..ahi {
        for j in blo..bhi {
            let mut k = 0;
            while i + k < ahi && j + k < bhi && a[i + k] == b[j + k] {
                k += 1;
            }
            if k > best.2 {
                best = (i, j, k);
            }
        }
    }
    best
}

/// Total size of the matching blocks found by recursive longest-block
/// decomposition.
pub fn matching_blocks(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut queue = vec![(0, a.len(), 0, b.len())];
    let mut total = 0;
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        let (i, j, k) = longest(&a, &b, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        total += k;
        if alo < i && blo < j {
            queue.push((alo, i, blo, j));
        }
        if i + k < ahi && j + k < bhi {
            queue.push((i + k, ahi, j + k, bhi));
        }
    }
    total
}

pub fn ratio(a: &str, b: &str) -> f64 {
    let n = a.chars().count() + b.chars().count();
    if n == 0 {
        1.0
    } else {
        2.0 * matching_blocks(a, b) as f64 / n as f64
    }
}

/// F statistic of a one-way repeated-measures design via explicit
/// residuals `x_ij − r_i − c_j + g`.
pub fn rm_anova_f(m: &[Vec<f64>]) -> (f64, usize, usize) {
    let n = m.len();
    let k = m[0].len();
    let g: f64 = m.iter().flatten().sum::<f64>() / (n * k) as f64;
    let r: Vec<f64> = m.iter().map(|row| row.iter().sum::<f64>() / k as f64).collect();
    let c: Vec<f64> = (0..k).map(|j| m.iter().map(|row| row[j]).sum::<f64>() / n as f64).collect();
    let mut ss_e = 0.0;
    for i in 0..n {
        for j in 0..k {
            let e = m[i][j] - r[i] - c[j] + g;
            ss_e += e * e;
        }
    }
    let ss_t: f64 = c.iter().map(|cj| n as f64 * (cj - g) * (cj - g)).sum();
    let df1 = k - 1;
    let df2 = (n - 1) * (k - 1);
    ((ss_t / df1 as f64) / (ss_e / df2 as f64), df1, df2)
}

/// Mean pairwise Jaccard distance.
pub fn diversity(lists: &[BTreeSet<String>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..lists.len() {
        for j in 0..lists.len() {
            if i < j {
                let inter = lists[i].intersection(&lists[j]).count() as f64;
                let union = lists[i].union(&lists[j]).count() as f64;
                sum += if union == 0.0 { 0.0 } else { (union - inter) / union };
                pairs += 1.0;
            }
        }
    }
    sum / pairs
}
