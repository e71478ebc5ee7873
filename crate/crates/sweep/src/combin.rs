//! Subsets of head indices: exact enumeration and seeded sampling.

use rand::seq::index::sample;
use rand::Rng;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All `k`-subsets of `items` in lexicographic order of positions.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    if k > n {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // advance the rightmost index that can still move
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// The subset at lexicographic `rank` among all `k`-subsets of `items`.
pub fn unrank(items: &[usize], k: usize, mut rank: u128) -> Vec<usize> {
    let n = items.len();
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for slot in 0..k {
        for i in next..n {
            let below = binomial(n - i - 1, k - slot - 1);
            if rank < below {
                out.push(items[i]);
                next = i + 1;
                break;
            }
            rank -= below;
        }
    }
    out
}

/// Every subset if there are at most `cap`, otherwise `cap` distinct ones
/// drawn uniformly, returned in lexicographic order. The flag says whether
/// the result was sampled.
pub fn subsets(
    items: &[usize],
    k: usize,
    cap: usize,
    rng: &mut impl Rng,
) -> (Vec<Vec<usize>>, bool) {
    let total = binomial(items.len(), k);
    if total <= cap as u128 {
        return (combinations(items, k), false);
    }
    let total = usize::try_from(total).unwrap_or(usize::MAX);
    let mut ranks = sample(rng, total, cap).into_vec();
    ranks.sort_unstable();
    (
        ranks
            .into_iter()
            .map(|r| unrank(items, k, r as u128))
            .collect(),
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(binomial(16, 8), 12_870);
        assert_eq!(binomial(4, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(combinations(&[0, 2, 4, 6], 2).len(), 6);
        assert_eq!(combinations(&[0, 2, 4, 6], 4), vec![vec![0, 2, 4, 6]]);
        assert_eq!(combinations(&[1, 3], 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn unrank_matches_enumeration() {
        let items: Vec<usize> = (0..7).collect();
        for k in 0..=7 {
            for (r, s) in combinations(&items, k).iter().enumerate() {
                assert_eq!(&unrank(&items, k, r as u128), s);
            }
        }
    }
}
