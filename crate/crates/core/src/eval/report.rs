use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::eval::metrics::AGA_CONVENTION;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct ReportHeader<'a> {
    pub kind: &'static str,
    pub report: &'a str,
    pub format_version: u32,
    pub config_hash: &'a str,
    pub seed: u64,
    pub aga_convention: &'static str,
}

#[derive(Serialize)]
struct Row<'a, T> {
    kind: &'static str,
    #[serde(flatten)]
    row: &'a T,
}

/// Writes a header line naming the config hash, then one JSON line per row.
pub fn write_report<W, T, I>(w: &mut W, report: &str, config_hash: &str, seed: u64, rows: I) -> Result<()>
where
    W: Write,
    T: Serialize,
    I: IntoIterator<Item = T>,
{
    let header = ReportHeader {
        kind: "header",
        report,
        format_version: REPORT_FORMAT_VERSION,
        config_hash,
        seed,
        aga_convention: AGA_CONVENTION,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut *w, &Row { kind: "row", row: &row })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct R {
        x: u32,
    }

    #[test]
    fn header_then_rows() {
        let mut buf = Vec::new();
        write_report(&mut buf, "eval", "abc", 3, [R { x: 1 }, R { x: 2 }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("\"config_hash\":\"abc\""));
        assert_eq!(lines[2], r#"{"kind":"row","x":2}"#);
    }
}
