//! Linear-chain CRF inference in log space.
//!
//! Emissions are `tokens × labels`. Transitions are `(labels + 2)²`, indexed
//! `[from][to]`, where `labels` is the virtual start state and `labels + 1`
//! the virtual stop state. A path `y` scores
//! `T[start][y₀] + Σ E[i][yᵢ] + Σ T[yᵢ₋₁][yᵢ] + T[yₙ₋₁][stop]`.

use super::matrix::Matrix;

#[inline]
pub fn start_state(labels: usize) -> usize {
    labels
}

#[inline]
pub fn stop_state(labels: usize) -> usize {
    labels + 1
}

fn check_shapes(emissions: &Matrix, transitions: &Matrix) {
    let l = emissions.cols();
    assert!(emissions.rows() > 0, "emissions must have at least one token");
    assert!(
        transitions.rows() == l + 2 && transitions.cols() == l + 2,
        "transition matrix must be (labels + 2)²"
    );
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Unnormalized score of one label path.
pub fn path_score(emissions: &Matrix, transitions: &Matrix, labels: &[usize]) -> f64 {
    check_shapes(emissions, transitions);
    assert_eq!(labels.len(), emissions.rows());
    let l = emissions.cols();
    let mut score = transitions.get(start_state(l), labels[0]);
    for (i, &y) in labels.iter().enumerate() {
        score += emissions.get(i, y);
        if i > 0 {
            score += transitions.get(labels[i - 1], y);
        }
    }
    score + transitions.get(labels[labels.len() - 1], stop_state(l))
}

/// Best label path and its score. Ties go to the lower label index.
pub fn viterbi_decode(emissions: &Matrix, transitions: &Matrix) -> (Vec<usize>, f64) {
    check_shapes(emissions, transitions);
    let (n, l) = (emissions.rows(), emissions.cols());
    let mut delta: Vec<f64> = (0..l)
        .map(|j| transitions.get(start_state(l), j) + emissions.get(0, j))
        .collect();
    let mut backptr = vec![0usize; n * l];
    let mut next = vec![0.0; l];
    for i in 1..n {
        for (j, slot) in next.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_score = delta[0] + transitions.get(0, j);
            for (k, &d) in delta.iter().enumerate().skip(1) {
                let s = d + transitions.get(k, j);
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            backptr[i * l + j] = best;
            *slot = best_score + emissions.get(i, j);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    let mut best = delta[0] + transitions.get(0, stop_state(l));
    for (j, &d) in delta.iter().enumerate().skip(1) {
        let s = d + transitions.get(j, stop_state(l));
        if s > best {
            last = j;
            best = s;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = backptr[i * l + path[i]];
    }
    (path, best)
}

/// Forward log-potentials: `alpha[i][j]` sums all prefixes ending at label `j`.
fn forward(emissions: &Matrix, transitions: &Matrix) -> Matrix {
    let (n, l) = (emissions.rows(), emissions.cols());
    let mut alpha = Matrix::zeros(n, l);
    for j in 0..l {
        alpha.set(0, j, transitions.get(start_state(l), j) + emissions.get(0, j));
    }
    for i in 1..n {
        for j in 0..l {
            let lse = log_sum_exp((0..l).map(|k| alpha.get(i - 1, k) + transitions.get(k, j)));
            alpha.set(i, j, lse + emissions.get(i, j));
        }
    }
    alpha
}

/// Backward log-potentials: `beta[i][j]` sums all suffixes after label `j` at `i`.
fn backward(emissions: &Matrix, transitions: &Matrix) -> Matrix {
    let (n, l) = (emissions.rows(), emissions.cols());
    let mut beta = Matrix::zeros(n, l);
    for j in 0..l {
        beta.set(n - 1, j, transitions.get(j, stop_state(l)));
    }
    for i in (0..n - 1).rev() {
        for j in 0..l {
            let lse = log_sum_exp(
                (0..l).map(|k| transitions.get(j, k) + emissions.get(i + 1, k) + beta.get(i + 1, k)),
            );
            beta.set(i, j, lse);
        }
    }
    beta
}

pub fn log_partition(emissions: &Matrix, transitions: &Matrix) -> f64 {
    check_shapes(emissions, transitions);
    let alpha = forward(emissions, transitions);
    let (n, l) = (emissions.rows(), emissions.cols());
    log_sum_exp((0..l).map(|j| alpha.get(n - 1, j) + transitions.get(j, stop_state(l))))
}

/// Negative log-likelihood of `gold` with gradients.
pub struct NllGrad {
    pub loss: f64,
    /// d loss / d emissions, `tokens × labels`.
    pub emissions: Matrix,
    /// d loss / d transitions, `(labels + 2)²`.
    pub transitions: Matrix,
}

/// `log Z − score(gold)` and its gradient: expected minus observed
/// emission and transition counts, from forward-backward marginals.
pub fn nll_with_grad(emissions: &Matrix, transitions: &Matrix, gold: &[usize]) -> NllGrad {
    check_shapes(emissions, transitions);
    assert_eq!(gold.len(), emissions.rows(), "gold path length");
    let (n, l) = (emissions.rows(), emissions.cols());
    let (start, stop) = (start_state(l), stop_state(l));
    let alpha = forward(emissions, transitions);
    let beta = backward(emissions, transitions);
    let log_z = log_sum_exp((0..l).map(|j| alpha.get(n - 1, j) + transitions.get(j, stop)));
    let gold_score = path_score(emissions, transitions, gold);

    let mut g_em = Matrix::zeros(n, l);
    let mut g_tr = Matrix::zeros(l + 2, l + 2);
    for i in 0..n {
        for j in 0..l {
            g_em.set(i, j, (alpha.get(i, j) + beta.get(i, j) - log_z).exp());
        }
    }
    for j in 0..l {
        g_tr.add_at(start, j, g_em.get(0, j));
        g_tr.add_at(j, stop, g_em.get(n - 1, j));
    }
    for i in 1..n {
        for a in 0..l {
            for b in 0..l {
                let p = (alpha.get(i - 1, a)
                    + transitions.get(a, b)
                    + emissions.get(i, b)
                    + beta.get(i, b)
                    - log_z)
                    .exp();
                g_tr.add_at(a, b, p);
            }
        }
    }
    for (i, &y) in gold.iter().enumerate() {
        g_em.add_at(i, y, -1.0);
        if i > 0 {
            g_tr.add_at(gold[i - 1], y, -1.0);
        }
    }
    g_tr.add_at(start, gold[0], -1.0);
    g_tr.add_at(gold[n - 1], stop, -1.0);

    NllGrad {
        loss: (log_z - gold_score).max(0.0),
        emissions: g_em,
        transitions: g_tr,
    }
}
