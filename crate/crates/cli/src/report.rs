//! Report writers: aligned text tables and comma-separated values for the
//! same rows, so downstream plotting needs no bespoke parser.

/// Render rows as a space-aligned table with a header line.
pub fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let header_cells: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

/// Render the same rows as CSV with a header line.
pub fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Fixed-precision metric formatting shared by every report.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment_and_csv() {
        let rows = vec![
            vec!["esd".to_string(), "0.95".to_string()],
            vec!["ed".to_string(), "0.5".to_string()],
        ];
        let table = aligned_table(&["paradigm", "acc"], &rows);
        assert!(table.starts_with("paradigm  acc"));
        assert!(table.contains("esd       0.95"));
        let csv = csv_table(&["paradigm", "acc"], &rows);
        assert_eq!(csv, "paradigm,acc\nesd,0.95\ned,0.5\n");
    }
}
