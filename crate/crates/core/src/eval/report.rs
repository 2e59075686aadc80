//! Plain-text and CSV renderings of metrics reports.

use super::grid::ExperimentConfig;
use super::metrics::MetricsReport;
use super::EvalError;

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-task rows followed by the aggregate lines.
pub fn render_table(report: &MetricsReport) -> String {
    let mut rows = vec![vec![
        "task".to_string(),
        "verdict".into(),
        "rounds".into(),
        "input_tok".into(),
        "output_tok".into(),
        "api_calls".into(),
        "coverage".into(),
    ]];
    for r in &report.per_task {
        let tokens = |n: u64| {
            if r.usage_estimated {
                format!("~{n}")
            } else {
                n.to_string()
            }
        };
        rows.push(vec![
            r.task_id.clone(),
            r.verdict.as_str().into(),
            r.rounds_to_pass.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            tokens(r.input_tokens),
            tokens(r.output_tokens),
            r.api_calls.to_string(),
            opt(r.coverage_pct, 1),
        ]);
    }
    let a = &report.aggregates;
    let mut out = format!("config {}\n", report.config_id);
    out.push_str(&align(&rows));
    out.push_str(&format!(
        "pass@1 {:.4} ({}/{}), excluding infrastructure errors {:.4}\n",
        a.pass_at_1, a.passed, a.tasks, a.pass_at_1_valid_only
    ));
    out.push_str(&format!(
        "mean input {:.1}, output {:.1}, api calls {:.2}, coverage {}\n",
        a.avg_input_tokens,
        a.avg_output_tokens,
        a.avg_api_calls,
        opt(a.avg_coverage_pct, 1)
    ));
    out
}

pub fn render_csv(report: &MetricsReport) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.per_task {
        w.serialize(row).map_err(|e| EvalError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
}

/// One line per configuration.
pub fn render_grid_table(reports: &[(&ExperimentConfig, &MetricsReport)]) -> String {
    let mut rows = vec![vec![
        "config".to_string(),
        "strategy".into(),
        "T".into(),
        "policy".into(),
        "pass@1".into(),
        "solved".into(),
        "input_tok".into(),
        "output_tok".into(),
        "api_calls".into(),
        "coverage".into(),
    ]];
    for (cfg, rep) in reports {
        let a = &rep.aggregates;
        let strategy = serde_json::to_value(cfg.run.strategy.kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        rows.push(vec![
            rep.config_id.clone(),
            strategy,
            cfg.run.strategy.budget_t.to_string(),
            cfg.run.policy.to_string(),
            format!("{:.4}", a.pass_at_1),
            format!("{}/{}", a.passed, a.tasks),
            format!("{:.1}", a.avg_input_tokens),
            format!("{:.1}", a.avg_output_tokens),
            format!("{:.2}", a.avg_api_calls),
            opt(a.avg_coverage_pct, 1),
        ]);
    }
    align(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::TaskRow;
    use crate::orchestrator::Verdict;

    #[test]
    fn csv_has_header_and_one_line_per_task() {
        let rows = vec![TaskRow {
            task_id: "t1".into(),
            verdict: Verdict::BudgetExhausted,
            rounds_to_pass: None,
            input_tokens: 10,
            output_tokens: 2,
            api_calls: 3,
            coverage_pct: Some(50.0),
            usage_estimated: true,
        }];
        let r = MetricsReport::from_rows("c", rows);
        let csv = render_csv(&r).unwrap();
        assert_eq!(
            csv,
            "task_id,verdict,rounds_to_pass,input_tokens,output_tokens,api_calls,coverage_pct,usage_estimated\n\
             t1,budget_exhausted,,10,2,3,50.0,true\n"
        );
        let table = render_table(&r);
        assert!(table.contains("~10"));
        assert!(table.contains("pass@1 0.0000 (0/1)"));
    }
}
