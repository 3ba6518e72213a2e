//! Number formatting and the report-row CSV writer shared by the CLI.

use std::io::Write;

use crate::error::Result;

/// Scientific notation with 17 significant digits, enough to round-trip
/// any `f64`.
pub fn sig17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// One line of `report.csv`: a quantity produced by a check or a margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub section: String,
    pub item: String,
    pub quantity: String,
    pub value: String,
}

impl ReportRow {
    pub fn new(section: &str, item: &str, quantity: &str, value: impl Into<String>) -> Self {
        Self {
            section: section.to_string(),
            item: item.to_string(),
            quantity: quantity.to_string(),
            value: value.into(),
        }
    }

    pub fn number(section: &str, item: &str, quantity: &str, value: f64) -> Self {
        Self::new(section, item, quantity, sig17(value))
    }
}

pub const REPORT_HEADER: [&str; 4] = ["section", "item", "quantity", "value"];

/// Writes rows as RFC-4180 CSV with a header line.
pub fn write_rows<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([&r.section, &r.item, &r.quantity, &r.value])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            assert_eq!(sig17(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(sig17(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn rows_are_quoted() {
        let rows = vec![ReportRow::new("check", "a,b", "x", "1")];
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "section,item,quantity,value\ncheck,\"a,b\",x,1\n");
    }
}
