use std::fmt::Write as _;

use crate::args::Format;

/// Rows of preformatted cells under a header.
#[derive(Debug, Default)]
pub struct Table {
    pub headers: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<&'static str>) -> Self {
        Table {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => {
                let mut out = self.headers.join(",");
                out.push('\n');
                for row in &self.rows {
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
                out
            }
            Format::Text => {
                let mut widths: Vec<usize> =
                    self.headers.iter().map(|h| h.chars().count()).collect();
                for row in &self.rows {
                    for (w, cell) in widths.iter_mut().zip(row) {
                        *w = (*w).max(cell.chars().count());
                    }
                }
                let mut out = String::new();
                let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
                    let parts: Vec<String> = cells
                        .zip(&widths)
                        .enumerate()
                        .map(|(i, (c, &w))| {
                            if i == 0 {
                                format!("{c:<w$}")
                            } else {
                                format!("{c:>w$}")
                            }
                        })
                        .collect();
                    let _ = writeln!(out, "{}", parts.join("  ").trim_end());
                };
                line(&mut out, &mut self.headers.iter().copied());
                for row in &self.rows {
                    line(&mut out, &mut row.iter().map(String::as_str));
                }
                out
            }
        }
    }
}

/// `part / whole` as a percentage with one decimal.
pub fn percent(part: u64, whole: u64) -> String {
    if whole == 0 {
        return "-".into();
    }
    format!("{:.1}%", 100.0 * part as f64 / whole as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_csv() {
        let mut t = Table::new(vec!["name", "params"]);
        t.push(vec!["a".into(), "12".into()]);
        t.push(vec!["long".into(), "3".into()]);
        assert_eq!(
            t.render(Format::Text),
            "name  params\na         12\nlong       3\n"
        );
        assert_eq!(t.render(Format::Csv), "name,params\na,12\nlong,3\n");
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent(90112, 1179648), "7.6%");
        assert_eq!(percent(17920, 73728), "24.3%");
        assert_eq!(percent(1, 0), "-");
    }
}
