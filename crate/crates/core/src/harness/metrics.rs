//! Run metrics: per-episode rows, the average-performance objective
//! J(𝕋) = (1/k)·Σ_j J(𝒯_j), the plasticity-loss detector, and the
//! score-aggregation statistics (mean, median, interquartile mean,
//! optimality gap).

use crate::error::{Error, Result};

/// One metrics record. RL runs emit one row per completed episode
/// (task-boundary cuts included); supervised runs emit one row per
/// epoch with accuracy in the return column. Training-statistic columns
/// carry the most recent update's values; diagnostics columns are empty
/// until their first collection. `wall_time` is pinned to zero so the
/// file is a pure function of (config, seed); real timing lives in the
/// manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub global_step: u64,
    pub task_index: usize,
    pub episode_return: f64,
    pub l_main: f64,
    pub l_churn: f64,
    pub lambda: f64,
    pub measured_churn: Option<f64>,
    pub srank: Option<usize>,
    pub offdiag_abs_sum: Option<f64>,
    pub diag_abs_sum: Option<f64>,
    pub wall_time: f64,
}

/// Per-task mean episode return (None for tasks with no completed
/// episode, which is also logged) and their overall mean.
pub fn avg_performance(rows: &[MetricsRow], k: usize) -> (Option<f64>, Vec<Option<f64>>) {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for r in rows {
        if r.task_index < k {
            sums[r.task_index] += r.episode_return;
            counts[r.task_index] += 1;
        }
    }
    let per_task: Vec<Option<f64>> = (0..k)
        .map(|j| {
            if counts[j] == 0 {
                log::warn!("task {j} interval contains no completed episodes");
                None
            } else {
                Some(sums[j] / counts[j] as f64)
            }
        })
        .collect();
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    let overall = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    (overall, per_task)
}

/// Per-task oracle gaps and the plasticity-loss flags: task j is
/// flagged when its gap exceeds task 1's gap.
pub fn detect_plasticity_loss(
    per_task_j_method: &[f64],
    per_task_j_oracle: &[f64],
) -> Result<(Vec<f64>, Vec<bool>)> {
    if per_task_j_method.len() != per_task_j_oracle.len() {
        return Err(Error::Dimension("per-task series must have equal lengths".into()));
    }
    if per_task_j_method.is_empty() {
        return Err(Error::Dimension("need at least one task".into()));
    }
    let gaps: Vec<f64> = per_task_j_oracle
        .iter()
        .zip(per_task_j_method)
        .map(|(o, m)| o - m)
        .collect();
    let first = gaps[0];
    let flags = gaps.iter().map(|&g| g > first).collect();
    Ok((gaps, flags))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile mean: drop ⌊n/4⌋ scores from each end, average the rest.
pub fn iqm(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = v.len() / 4;
    let kept = &v[drop..v.len() - drop];
    mean(kept)
}

/// Mean of max(0, 1 − score) over runs (scores normalized to [0, 1]).
pub fn optimality_gap(xs: &[f64]) -> f64 {
    mean(&xs.iter().map(|&x| (1.0 - x).max(0.0)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, task: usize, ret: f64) -> MetricsRow {
        MetricsRow {
            global_step: step,
            task_index: task,
            episode_return: ret,
            l_main: 0.0,
            l_churn: 0.0,
            lambda: 0.0,
            measured_churn: None,
            srank: None,
            offdiag_abs_sum: None,
            diag_abs_sum: None,
            wall_time: 0.0,
        }
    }

    #[test]
    fn avg_performance_hand_cases() {
        let rows = vec![row(10, 0, 10.0), row(20, 0, 10.0), row(110, 1, 20.0)];
        let (overall, per_task) = avg_performance(&rows, 2);
        assert_eq!(per_task, vec![Some(10.0), Some(20.0)]);
        assert_eq!(overall, Some(15.0));

        // Single task: overall equals the task mean.
        let (overall, per_task) = avg_performance(&rows[..2], 1);
        assert_eq!(per_task, vec![Some(10.0)]);
        assert_eq!(overall, Some(10.0));

        // An empty task interval is flagged as undefined.
        let (overall, per_task) = avg_performance(&rows[..2], 2);
        assert_eq!(per_task, vec![Some(10.0), None]);
        assert_eq!(overall, Some(10.0));
    }

    #[test]
    fn avg_performance_attribution_matches_naive_rescan() {
        // Episodes interleaved across a task boundary at step 100:
        // attribution goes to the task in which the episode ends.
        let episodes = [(95u64, 5.0), (99, 7.0), (101, 9.0), (130, 11.0)];
        let n = 100u64;
        let rows: Vec<MetricsRow> =
            episodes.iter().map(|&(s, r)| row(s, ((s - 1) / n) as usize, r)).collect();
        let (_, per_task) = avg_performance(&rows, 2);
        // Naive re-scan oracle.
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for &(s, r) in &episodes {
            let t = if s <= n { 0 } else { 1 };
            sums[t] += r;
            counts[t] += 1;
        }
        for t in 0..2 {
            assert_eq!(per_task[t].unwrap(), sums[t] / counts[t] as f64);
        }
    }

    #[test]
    fn avg_performance_is_linear_in_returns() {
        let rows = vec![row(10, 0, 3.0), row(20, 0, 5.0), row(110, 1, 7.0)];
        let (j1, _) = avg_performance(&rows, 2);
        let scaled: Vec<MetricsRow> = rows
            .iter()
            .map(|r| MetricsRow { episode_return: r.episode_return * 4.0, ..*r })
            .collect();
        let (j4, _) = avg_performance(&scaled, 2);
        assert!((j4.unwrap() - 4.0 * j1.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn plasticity_detector_cases() {
        // Method equals oracle: zero gaps, nothing flagged.
        let (gaps, flags) = detect_plasticity_loss(&[5.0, 6.0], &[5.0, 6.0]).unwrap();
        assert_eq!(gaps, vec![0.0, 0.0]);
        assert_eq!(flags, vec![false, false]);

        // Monotonically widening gaps: every later task flagged.
        let (_, flags) = detect_plasticity_loss(&[5.0, 4.0, 2.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(flags, vec![false, true, true]);

        // Synthetic gap series (0, 1, 3) flags tasks 2 and 3.
        let (gaps, flags) = detect_plasticity_loss(&[1.0, 0.0, -2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(gaps, vec![0.0, 1.0, 3.0]);
        assert_eq!(flags, vec![false, true, true]);

        assert!(detect_plasticity_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregation_statistics_hand_values() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        let xs = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(mean(&xs), 0.5);
        assert_eq!(median(&xs), 0.5);
        assert_eq!(iqm(&xs), 0.5);
        assert_eq!(optimality_gap(&xs), 0.5);
        // All scores at 1: no gap.
        assert_eq!(optimality_gap(&[1.0, 1.0, 1.0]), 0.0);
        // IQM of a constant vector is the constant, and lies in [min, max].
        assert_eq!(iqm(&[2.5; 7]), 2.5);
        let v = [0.1, 0.9, 0.4, 0.3, 0.8];
        let i = iqm(&v);
        assert!(i >= 0.1 && i <= 0.9);
        // Permutation invariance.
        assert_eq!(iqm(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[9.0, 1.0, 5.0]), 5.0);
    }
}
