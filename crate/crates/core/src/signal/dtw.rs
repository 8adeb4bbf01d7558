use super::SignalError;

/// Monotone, continuous alignment from `(0, 0)` to `(len_a − 1, len_b − 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath(pub Vec<(usize, usize)>);

impl AlignmentPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Checks the boundary and step invariants against sequence lengths.
    pub fn is_valid(&self, len_a: usize, len_b: usize) -> bool {
        let p = &self.0;
        if p.first() != Some(&(0, 0)) || p.last() != Some(&(len_a - 1, len_b - 1)) {
            return false;
        }
        p.windows(2).all(|w| {
            let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-cost alignment under steps `{(1,0), (0,1), (1,1)}` with Euclidean
/// frame cost. Among equal-cost continuations the path prefers `(1,1)`, then
/// `(1,0)`, then `(0,1)`, decided from the start of the sequences.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(AlignmentPath, f64), SignalError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(SignalError::Config("dtw needs non-empty sequences".into()));
    }
    if a.iter().chain(b).any(|f| f.len() != a[0].len()) {
        return Err(SignalError::Config("dtw frames differ in dimension".into()));
    }
    // Cost-to-go from (i, j) to the end, inclusive of (i, j).
    let idx = |i: usize, j: usize| i * m + j;
    let mut g = vec![f64::INFINITY; n * m];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            let d = euclidean(&a[i], &b[j]);
            let rest = if i == n - 1 && j == m - 1 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i + 1 < n && j + 1 < m {
                    best = best.min(g[idx(i + 1, j + 1)]);
                }
                if i + 1 < n {
                    best = best.min(g[idx(i + 1, j)]);
                }
                if j + 1 < m {
                    best = best.min(g[idx(i, j + 1)]);
                }
                best
            };
            g[idx(i, j)] = d + rest;
        }
    }
    let mut path = vec![(0, 0)];
    let (mut i, mut j) = (0, 0);
    while (i, j) != (n - 1, m - 1) {
        let mut next = None;
        let mut best = f64::INFINITY;
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < n && nj < m && g[idx(ni, nj)] < best {
                best = g[idx(ni, nj)];
                next = Some((ni, nj));
            }
        }
        (i, j) = next.expect("a step toward the end always exists");
        path.push((i, j));
    }
    Ok((AlignmentPath(path), g[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over all monotone continuous paths, by exhaustive recursion.
    fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn go(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
            let d = euclidean(&a[i], &b[j]);
            if i == a.len() - 1 && j == b.len() - 1 {
                return d;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            d + best
        }
        go(a, b, 0, 0)
    }

    fn path_cost(a: &[Vec<f64>], b: &[Vec<f64>], p: &AlignmentPath) -> f64 {
        p.pairs().iter().map(|&(i, j)| euclidean(&a[i], &b[j])).sum()
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0]];
        let (p, cost) = dtw(&a, &a).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(p.0, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn tie_rule_example() {
        let a = vec![vec![0.0], vec![2.0], vec![4.0]];
        let b = vec![vec![0.0], vec![4.0]];
        let (p, cost) = dtw(&a, &b).unwrap();
        assert_eq!(cost, 2.0);
        assert_eq!(p.0, vec![(0, 0), (1, 1), (2, 1)]);
    }

    #[test]
    fn matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let a: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let (p, cost) = dtw(&a, &b).unwrap();
            let oracle = brute_force(&a, &b);
            assert!((cost - oracle).abs() < 1e-12);
            assert!(p.is_valid(6, 4));
            assert!((path_cost(&a, &b, &p) - cost).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(dtw(&[], &[vec![1.0]]).is_err());
    }
}
