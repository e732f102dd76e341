//! Cross-run aggregation: per-environment normalization against the
//! vanilla/oracle calibration means, then Mean / Median / IQM /
//! Optimality-Gap over the pooled normalized scores per method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::csvio::{csv_field, fmt_g10, split_record};
use crate::harness::metrics::{iqm, mean, median, optimality_gap};

/// One run's scalar score (its average performance J over the sequence).
#[derive(Debug, Clone, PartialEq)]
pub struct RunScore {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean: f64,
    pub median: f64,
    pub iqm: f64,
    pub optimality_gap: f64,
    pub runs: usize,
}

/// Aggregates scores per method over the pooled (env × seed) runs.
/// Scores are normalized per environment to (vanilla mean → 0,
/// oracle mean → 1) unless explicit bounds are given; environments with
/// no usable normalization are skipped with a warning.
pub fn aggregate_scores(
    scores: &[RunScore],
    bounds: Option<(f64, f64)>,
) -> Result<(Vec<MethodSummary>, Vec<String>)> {
    if scores.is_empty() {
        return Err(Error::Config("no runs to aggregate".into()));
    }
    let mut warnings = Vec::new();
    let mut envs: BTreeMap<&str, Vec<&RunScore>> = BTreeMap::new();
    for s in scores {
        envs.entry(s.env.as_str()).or_default().push(s);
    }
    // Fixed accumulation order makes the result independent of input order.
    for runs in envs.values_mut() {
        runs.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    }
    let mut per_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (env, runs) in &envs {
        let (lo, hi) = match bounds {
            Some(b) => b,
            None => {
                let vanilla: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.method == "vanilla")
                    .map(|r| r.score)
                    .collect();
                let oracle: Vec<f64> =
                    runs.iter().filter(|r| r.method == "oracle").map(|r| r.score).collect();
                if vanilla.is_empty() || oracle.is_empty() {
                    warnings.push(format!(
                        "env {env}: missing vanilla or oracle runs for normalization; skipped"
                    ));
                    continue;
                }
                (mean(&vanilla), mean(&oracle))
            }
        };
        if (hi - lo).abs() < 1e-12 {
            warnings.push(format!("env {env}: degenerate normalization bounds; skipped"));
            continue;
        }
        for r in runs {
            per_method.entry(r.method.as_str()).or_default().push((r.score - lo) / (hi - lo));
        }
    }
    let summaries = per_method
        .into_iter()
        .map(|(method, vals)| MethodSummary {
            method: method.to_string(),
            mean: mean(&vals),
            median: median(&vals),
            iqm: iqm(&vals),
            optimality_gap: optimality_gap(&vals),
            runs: vals.len(),
        })
        .collect();
    Ok((summaries, warnings))
}

pub const SUMMARY_HEADER: &str = "method,mean,median,iqm,optimality_gap,runs";

pub fn summary_to_string(summaries: &[MethodSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&s.method),
            fmt_g10(s.mean),
            fmt_g10(s.median),
            fmt_g10(s.iqm),
            fmt_g10(s.optimality_gap),
            s.runs
        );
    }
    out
}

pub fn write_summary_csv(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    std::fs::write(path, summary_to_string(summaries))?;
    Ok(())
}

pub fn parse_summary_csv(content: &str) -> Result<Vec<MethodSummary>> {
    let mut lines = content.lines();
    match lines.next() {
        Some(h) if h == SUMMARY_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected summary header {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f = split_record(line);
        if f.len() != 6 {
            return Err(Error::Format(format!("summary row has {} fields", f.len())));
        }
        let num =
            |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        out.push(MethodSummary {
            method: f[0].clone(),
            mean: num(&f[1])?,
            median: num(&f[2])?,
            iqm: num(&f[3])?,
            optimality_gap: num(&f[4])?,
            runs: f[5].parse().map_err(|_| Error::Format(format!("bad run count {:?}", f[5])))?,
        });
    }
    Ok(out)
}

/// Scans run directories (each holding manifest.json + metrics.csv) into
/// scores for aggregation.
pub fn collect_run_scores(dirs: &[std::path::PathBuf]) -> Result<(Vec<RunScore>, Vec<String>)> {
    let mut scores = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let manifest_path = dir.join("manifest.json");
        let metrics_path = dir.join("metrics.csv");
        if !manifest_path.exists() || !metrics_path.exists() {
            warnings.push(format!("{}: not a run directory; skipped", dir.display()));
            continue;
        }
        let manifest: crate::harness::Manifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let rows = crate::harness::csvio::read_metrics_csv(&metrics_path)?;
        let k = manifest
            .tasks
            .as_ref()
            .map(|t| t.len())
            .or_else(|| manifest.config.sl.as_ref().and_then(|s| s.num_tasks))
            .unwrap_or(1);
        let (overall, _) = crate::harness::metrics::avg_performance(&rows, k);
        match overall {
            Some(score) => scores.push(RunScore {
                method: manifest.config.method.name().to_string(),
                env: manifest.config.env_label(),
                seed: manifest.seed,
                score,
            }),
            None => warnings.push(format!("{}: no completed episodes; skipped", dir.display())),
        }
    }
    Ok((scores, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(method: &str, env: &str, seed: u64, score: f64) -> RunScore {
        RunScore { method: method.into(), env: env.into(), seed, score }
    }

    #[test]
    fn normalization_against_calibration_means() {
        let scores = vec![
            score("vanilla", "cartpole", 0, 50.0),
            score("vanilla", "cartpole", 1, 70.0),
            score("oracle", "cartpole", 0, 260.0),
            score("oracle", "cartpole", 1, 300.0),
            score("c_chain", "cartpole", 0, 170.0),
            score("c_chain", "cartpole", 1, 170.0),
        ];
        let (summaries, warnings) = aggregate_scores(&scores, None).unwrap();
        assert!(warnings.is_empty());
        // vanilla mean 60, oracle mean 280: c_chain at 170 normalizes to 0.5.
        let chain = summaries.iter().find(|s| s.method == "c_chain").unwrap();
        assert!((chain.mean - 0.5).abs() < 1e-12);
        assert!((chain.optimality_gap - 0.5).abs() < 1e-12);
        let vanilla = summaries.iter().find(|s| s.method == "vanilla").unwrap();
        assert!(vanilla.mean.abs() < 0.3, "vanilla centers near 0");
    }

    #[test]
    fn missing_calibration_warns_and_skips() {
        let scores = vec![score("c_chain", "acrobot", 0, -100.0)];
        let (summaries, warnings) = aggregate_scores(&scores, None).unwrap();
        assert!(summaries.is_empty());
        assert_eq!(warnings.len(), 1);

        // Explicit bounds rescue the aggregation.
        let (summaries, warnings) = aggregate_scores(&scores, Some((-500.0, -100.0))).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(summaries[0].runs, 1);
        assert!((summaries[0].mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut scores = vec![
            score("vanilla", "e", 0, 0.0),
            score("oracle", "e", 0, 1.0),
            score("m", "e", 0, 0.3),
            score("m", "e", 1, 0.9),
            score("m", "e", 2, 0.5),
            score("m", "e", 3, 0.7),
        ];
        let (a, _) = aggregate_scores(&scores, None).unwrap();
        scores.reverse();
        let (b, _) = aggregate_scores(&scores, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summary_csv_round_trip() {
        let summaries = vec![MethodSummary {
            method: "c_chain".into(),
            mean: 0.5,
            median: 0.5,
            iqm: 0.5,
            optimality_gap: 0.5,
            runs: 10,
        }];
        let s = summary_to_string(&summaries);
        let back = parse_summary_csv(&s).unwrap();
        assert_eq!(back, summaries);
    }
}
