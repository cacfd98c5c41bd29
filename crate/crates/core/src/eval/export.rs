use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{EvalError, EvalReport, PrPoint};

pub const COMBINED_LABEL: &str = "combined";
const HEADER: &str = "recall,precision,confidence";

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFile {
    pub label: String,
    pub path: PathBuf,
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn to_csv(points: &[PrPoint]) -> String {
    let mut s = String::with_capacity(32 * (points.len() + 1));
    s.push_str(HEADER);
    s.push('\n');
    for p in points {
        // `{}` on f64 prints the shortest representation that parses back exactly.
        let _ = writeln!(s, "{},{},{}", p.recall, p.precision, p.confidence);
    }
    s
}

/// Writes one `recall,precision,confidence` CSV per class with ground truth
/// plus `combined.csv`. Returns the files in write order, combined last.
pub fn export_pr_plot_data(report: &EvalReport, dir: &Path) -> Result<Vec<PlotFile>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    let mut files = Vec::with_capacity(report.per_class.len() + 1);
    for (i, class) in report.per_class.iter().enumerate() {
        let path = dir.join(format!("class_{:03}_{}.csv", i, file_stem(&class.label)));
        std::fs::write(&path, to_csv(&class.pr_points)).map_err(|e| EvalError::io(&path, e))?;
        files.push(PlotFile {
            label: class.label.clone(),
            path,
        });
    }
    let path = dir.join(format!("{COMBINED_LABEL}.csv"));
    std::fs::write(&path, to_csv(&report.combined.pr_points))
        .map_err(|e| EvalError::io(&path, e))?;
    files.push(PlotFile {
        label: COMBINED_LABEL.to_string(),
        path,
    });
    Ok(files)
}

pub fn read_pr_csv(path: &Path) -> Result<Vec<PrPoint>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(EvalError::Invalid(format!(
            "{}: missing `{HEADER}` header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EvalError::Invalid(format!("{}: {e}", path.display())))?;
            match v[..] {
                [recall, precision, confidence] => Ok(PrPoint {
                    recall,
                    precision,
                    confidence,
                }),
                _ => Err(EvalError::Invalid(format!(
                    "{}: expected 3 columns in `{l}`",
                    path.display()
                ))),
            }
        })
        .collect()
}
