//! Plain-text rendering of evaluation reports.

use std::fmt::Write;

use tta_core::evaluation::EvalReport;

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// `key=value` summary followed by an aligned per-class table.
pub fn render(report: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "map_5095={:?} ar_100={:?}", report.map_5095, report.ar_100).unwrap();
    writeln!(s, "{:>6} {:>7} {:>8} {:>8} {:>8} {:>8}", "class", "num_gt", "AP", "AP50", "AP75", "AR").unwrap();
    for c in 0..report.num_classes as usize {
        let row = &report.ap[c];
        let ar = {
            let r: Vec<f64> = report.recall[c].iter().flatten().copied().collect();
            (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
        };
        writeln!(
            s,
            "{:>6} {:>7} {:>8} {:>8} {:>8} {:>8}",
            c,
            report.num_gt[c],
            cell(report.class_ap(c)),
            cell(row[0]),
            cell(row[5]),
            cell(ar)
        )
        .unwrap();
    }
    s
}
