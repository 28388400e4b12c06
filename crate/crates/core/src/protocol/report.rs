use serde::{Deserialize, Serialize};

use super::{MethodVariant, RunResult};
use crate::gapmetrics::GapReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub avg: f64,
    pub last: f64,
}

/// Per-seed values and their means for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: MethodVariant,
    pub runs: Vec<SeedSummary>,
    pub mean_avg: f64,
    pub mean_last: f64,
    pub results: Vec<RunResult>,
}

impl SweepSummary {
    /// Panics on an empty slice.
    pub fn from_results(results: &[RunResult]) -> Self {
        assert!(!results.is_empty(), "no results to summarize");
        let runs: Vec<SeedSummary> = results
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                avg: r.avg,
                last: r.last,
            })
            .collect();
        let n = runs.len() as f64;
        Self {
            method: results[0].method,
            mean_avg: runs.iter().map(|r| r.avg).sum::<f64>() / n,
            mean_last: runs.iter().map(|r| r.last).sum::<f64>() / n,
            runs,
            results: results.to_vec(),
        }
    }
}

pub fn per_task_csv(result: &RunResult) -> String {
    let mut out = String::from("task,classes,epochs,accuracy,pos,neg,inter_modality_mean\n");
    for (t, acc) in result.per_task_accuracy.iter().enumerate() {
        let classes: Vec<String> = result.task_classes[t].iter().map(|c| c.to_string()).collect();
        let gap = &result.gap_trace[t];
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t + 1,
            classes.join(" "),
            result.epochs_per_task[t],
            acc,
            gap.pos,
            gap.neg,
            gap.inter_modality_mean
        ));
    }
    out
}

/// Pretrained gap first, then one row per task.
pub fn gap_trace_csv(result: &RunResult) -> String {
    let mut out = format!("stage,{}\n", GapReport::CSV_HEADER);
    out.push_str(&format!("pretrained,{}\n", result.pretrain_gap.to_csv_row()));
    for (t, g) in result.gap_trace.iter().enumerate() {
        out.push_str(&format!("task{},{}\n", t + 1, g.to_csv_row()));
    }
    out
}

/// Markdown summary of several runs, one row per run followed by per-method
/// means when a method appears more than once.
pub fn render_report(results: &[RunResult]) -> String {
    let mut out = String::from("| method | seed | epochs/task | Avg | Last | pos | neg |\n|---|---|---|---|---|---|---|\n");
    for r in results {
        let g = r.gap_trace.last().unwrap_or(&r.pretrain_gap);
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.method.name(),
            r.seed,
            r.epochs_per_task.first().copied().unwrap_or(0),
            r.avg,
            r.last,
            g.pos,
            g.neg
        ));
    }
    let mut methods: Vec<MethodVariant> = Vec::new();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let grouped: Vec<(MethodVariant, Vec<RunResult>)> = methods
        .into_iter()
        .map(|m| (m, results.iter().filter(|r| r.method == m).cloned().collect()))
        .collect();
    if grouped.iter().any(|(_, rs)| rs.len() > 1) {
        out.push_str("\n| method | runs | mean Avg | mean Last |\n|---|---|---|---|\n");
        for (m, rs) in grouped {
            let s = SweepSummary::from_results(&rs);
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} |\n",
                m.name(),
                rs.len(),
                s.mean_avg,
                s.mean_last
            ));
        }
    }
    let analyses: Vec<&RunResult> = results.iter().filter(|r| r.subspace.is_some()).collect();
    if !analyses.is_empty() {
        out.push_str("\n| method | seed | d(B_i,B_t) | d(B_i,B_vc) | d(B_i,B_t+vc) |\n|---|---|---|---|---|\n");
        for r in analyses {
            let s = r.subspace.as_ref().expect("filtered");
            out.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} |\n",
                r.method.name(),
                r.seed,
                s.d_image_text,
                s.d_image_visual,
                s.d_image_combined
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gap(pos: f64, neg: f64) -> GapReport {
        GapReport {
            pos,
            neg,
            inter_modality_mean: (pos + neg) / 2.0,
            n_images: 4,
            n_classes: 2,
        }
    }

    fn result(method: MethodVariant, seed: u64, acc: Vec<f64>) -> RunResult {
        let n = acc.len();
        RunResult {
            method,
            seed,
            task_classes: (0..n).map(|t| vec![2 * t, 2 * t + 1]).collect(),
            epochs_per_task: vec![3; n],
            avg: acc.iter().sum::<f64>() / n as f64,
            last: acc[n - 1],
            per_task_accuracy: acc,
            pretrain_gap: gap(0.3, 0.2),
            gap_trace: vec![gap(0.25, 0.1); n],
            probe: None,
            subspace: None,
            wall_time: Default::default(),
        }
    }

    #[test]
    fn sweep_means_and_per_seed_values() {
        let s = SweepSummary::from_results(&[
            result(MethodVariant::Full, 1, vec![1.0, 0.5]),
            result(MethodVariant::Full, 2, vec![1.0, 0.7]),
        ]);
        assert_eq!(s.runs.len(), 2);
        assert!((s.mean_last - 0.6).abs() < 1e-15);
        assert!((s.mean_avg - 0.8).abs() < 1e-15);
    }

    #[test]
    fn csv_shapes() {
        let r = result(MethodVariant::Naive, 1, vec![1.0, 0.5, 0.25]);
        assert_eq!(per_task_csv(&r).lines().count(), 4);
        assert!(per_task_csv(&r).lines().nth(2).unwrap().starts_with("2,2 3,3,0.5,"));
        let g = gap_trace_csv(&r);
        assert_eq!(g.lines().count(), 5);
        assert!(g.lines().nth(1).unwrap().starts_with("pretrained,0.3,0.2"));
    }

    #[test]
    fn report_groups_repeated_methods() {
        let rs = [
            result(MethodVariant::Naive, 1, vec![0.5]),
            result(MethodVariant::Naive, 2, vec![0.7]),
        ];
        let text = render_report(&rs);
        assert!(text.contains("| naive | 2 | 0.6000 | 0.6000 |"));
        assert!(!render_report(&rs[..1]).contains("mean Avg"));
    }
}
