//! Scalar summaries of a decoder cross-attention matrix `[N_r, M]`.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentDiagnostics {
    /// Mean attention mass inside a band around the straight diagonal.
    pub diagonality: f64,
    /// Fraction of adjacent frames whose argmax character does not move backwards.
    pub monotonicity: f64,
}

pub fn band_half_width(m: usize) -> f64 {
    (0.1 * m as f64).max(1.0)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `weights` holds one attention distribution over `M` characters per reduced frame.
pub fn alignment_diagnostics(weights: &Tensor) -> AlignmentDiagnostics {
    let (n, m) = weights.dims2().expect("attention matrix is rank 2");
    if n == 0 || m == 0 {
        return AlignmentDiagnostics {
            diagonality: 0.0,
            monotonicity: 1.0,
        };
    }
    let w = band_half_width(m);
    let mut mass = 0.0;
    for i in 0..n {
        let centre = i as f64 * m as f64 / n as f64;
        mass += weights
            .row(i)
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as f64 - centre).abs() <= w)
            .map(|(_, v)| v)
            .sum::<f64>();
    }
    let monotonicity = if n < 2 {
        1.0
    } else {
        let peaks: Vec<usize> = (0..n).map(|i| argmax(weights.row(i))).collect();
        peaks.windows(2).filter(|p| p[1] >= p[0]).count() as f64 / (n - 1) as f64
    };
    AlignmentDiagnostics {
        diagonality: mass / n as f64,
        monotonicity,
    }
}

/// Averages per-utterance diagnostics.
pub fn mean_diagnostics(items: &[AlignmentDiagnostics]) -> AlignmentDiagnostics {
    if items.is_empty() {
        return AlignmentDiagnostics {
            diagonality: 0.0,
            monotonicity: 0.0,
        };
    }
    let n = items.len() as f64;
    AlignmentDiagnostics {
        diagonality: items.iter().map(|d| d.diagonality).sum::<f64>() / n,
        monotonicity: items.iter().map(|d| d.monotonicity).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(n: usize, m: usize, col: impl Fn(usize) -> usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, m]);
        for i in 0..n {
            t.data_mut()[i * m + col(i)] = 1.0;
        }
        t
    }

    #[test]
    fn diagonal_one_hot() {
        let (n, m) = (20, 10);
        let t = one_hot(n, m, |i| (i * m) / n);
        let d = alignment_diagnostics(&t);
        assert!((d.diagonality - 1.0).abs() < 1e-12);
        assert_eq!(d.monotonicity, 1.0);
    }

    #[test]
    fn uniform_attention_band_fraction() {
        let t = Tensor::full(&[10, 10], 0.1);
        let d = alignment_diagnostics(&t);
        // The first and last rows lose one band column to the edge.
        assert!((d.diagonality - 0.28).abs() < 1e-12, "{}", d.diagonality);
    }

    #[test]
    fn one_backward_jump() {
        let n = 9;
        let t = one_hot(n, 5, |i| if i == 5 { 0 } else { i / 2 });
        let d = alignment_diagnostics(&t);
        assert!((d.monotonicity - (n as f64 - 2.0) / (n as f64 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_frame_and_mean() {
        let d = alignment_diagnostics(&Tensor::ones(&[1, 1]));
        assert_eq!(d.monotonicity, 1.0);
        assert_eq!(d.diagonality, 1.0);
        let m = mean_diagnostics(&[d, AlignmentDiagnostics { diagonality: 0.0, monotonicity: 0.5 }]);
        assert_eq!(m, AlignmentDiagnostics { diagonality: 0.5, monotonicity: 0.75 });
    }
}
