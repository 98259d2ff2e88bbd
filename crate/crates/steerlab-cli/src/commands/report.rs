use anyhow::{bail, Context, Result};

use steerlab::judge::aggregate;

use crate::cli::ReportArgs;
use crate::reports::{read_run_report, REPORT_SCHEMA_VERSION};

/// Summarize run reports into figure-data CSVs. Every fraction is recomputed
/// from the shipped raw verdicts; a stored distribution that disagrees with
/// its own records fails the command.
pub fn run(args: &ReportArgs) -> Result<()> {
    let mut summary_rows = Vec::new();
    let mut alpha_rows = Vec::new();

    for path in &args.reports {
        let report = read_run_report(path)?;

        let verdicts: Vec<_> = report.records.iter().map(|r| r.verdict.clone()).collect();
        let recomputed = aggregate(&verdicts);
        if recomputed != report.distribution {
            bail!(
                "{}: stored distribution does not match its raw verdicts",
                path.display()
            );
        }

        if report.kind == "alpha_sweep" {
            let summary = report
                .alpha_summary
                .as_ref()
                .with_context(|| format!("{}: alpha_sweep report lacks summary", path.display()))?;
            for (alpha, cell) in summary.grid.iter().zip(&summary.per_alpha) {
                let n = summary.n_prompts as f64;
                alpha_rows.push(format!(
                    "{alpha},{:.6},{:.6}",
                    cell.target_count as f64 / n,
                    cell.degenerate_count as f64 / n
                ));
            }
        } else {
            let intervention = match &report.intervention {
                Some(iv) => format!("layer={} alpha={}", iv.layer, iv.alpha),
                None => "none".to_string(),
            };
            summary_rows.push(format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                report.task.name,
                report.condition,
                intervention,
                recomputed.target_frac,
                recomputed.opposite_frac,
                recomputed.neither_frac,
                recomputed.degenerate_frac,
            ));
            println!(
                "{} [{} / {}] intervention: {}  target {:.3}  opposite {:.3}  neither {:.3}  degenerate {:.3}",
                report.task.name,
                report.mode,
                report.condition,
                intervention,
                recomputed.target_frac,
                recomputed.opposite_frac,
                recomputed.neither_frac,
                recomputed.degenerate_frac,
            );
        }
    }

    let report_dir = args.out.join("reports");
    std::fs::create_dir_all(&report_dir)
        .with_context(|| format!("creating {}", report_dir.display()))?;

    let mut summary = format!("# schema_version={REPORT_SCHEMA_VERSION}\n");
    summary.push_str(
        "task,condition,intervention,target_frac,opposite_frac,neither_frac,degenerate_frac\n",
    );
    for row in &summary_rows {
        summary.push_str(row);
        summary.push('\n');
    }
    let summary_path = report_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;

    let mut curve = format!("# schema_version={REPORT_SCHEMA_VERSION}\n");
    curve.push_str("alpha,target_frac,degenerate_frac\n");
    for row in &alpha_rows {
        curve.push_str(row);
        curve.push('\n');
    }
    let curve_path = report_dir.join("alpha_curve.csv");
    std::fs::write(&curve_path, curve)
        .with_context(|| format!("writing {}", curve_path.display()))?;

    println!(
        "wrote {} ({} rows) and {} ({} rows)",
        summary_path.display(),
        summary_rows.len(),
        curve_path.display(),
        alpha_rows.len(),
    );
    Ok(())
}
