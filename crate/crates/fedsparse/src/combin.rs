//! Lexicographic enumeration of index subsets, shared by every exhaustive
//! search in the crate.

/// Number of `k`-subsets of `[0, n)`, clamped to `u128::MAX` on overflow.
pub fn count_combinations(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k) as u128;
    let n = n as u128;
    let mut acc: u128 = 1;
    for i in 1..=k {
        // Multiply before dividing so every intermediate stays integral.
        match acc.checked_mul(n - k + i) {
            Some(v) => acc = v / i,
            None => return u128::MAX,
        }
    }
    acc
}

/// Calls `f` on every size-`k` subset of `[0, n)` in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    if k == 0 {
        f(&[]);
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        // Find the rightmost index that can still move up.
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] < n - k + pos {
                idx[pos] += 1;
                for j in pos + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return;
            }
        }
    }
}
