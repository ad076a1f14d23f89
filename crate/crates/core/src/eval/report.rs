//! Machine-readable report output.

use serde::Serialize;

use super::LeakageReport;

#[derive(Serialize)]
struct CsvRow<'a> {
    scenario: &'a str,
    defense: &'a str,
    strategy: &'a str,
    schedules: u64,
    equal: bool,
    first_divergence_index: String,
}

pub const CSV_HEADER: &str = "scenario,defense,strategy,schedules,equal,first_divergence_index";

/// One CSV row per report, with a header line.
pub fn to_csv(reports: &[LeakageReport]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            scenario: &r.scenario,
            defense: &r.defense,
            strategy: &r.strategy,
            schedules: r.schedules_explored,
            equal: r.traces_equal,
            first_divergence_index: r.first_divergence.as_ref().map_or(String::new(), |d| d.index.to_string()),
        })?;
    }
    if reports.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One JSON object per line.
pub fn to_json_lines(reports: &[LeakageReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&serde_json::to_string(r).expect("report serializes"));
        s.push('\n');
    }
    s
}

/// Human-readable summary line.
pub fn summary_line(r: &LeakageReport) -> String {
    let d = match &r.first_divergence {
        None => "no divergence".to_string(),
        Some(d) => format!(
            "diverged at {}: {} | {}",
            d.index,
            d.a.as_deref().unwrap_or("<end>"),
            d.b.as_deref().unwrap_or("<end>")
        ),
    };
    format!(
        "{} defense={} ({}) strategy={} schedules={} equal={} {}",
        r.scenario, r.defense, r.protection, r.strategy, r.schedules_explored, r.traces_equal, d
    )
}
