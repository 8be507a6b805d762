//! CSV and report writers.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// Header plus rows, `.` decimal separator, newline-terminated.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new<I, T>(header: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut csv = Self::default();
        csv.push_fields(header);
        csv
    }

    fn push_fields<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        for (i, f) in fields.into_iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            self.text.push_str(f.as_ref());
        }
        self.text.push('\n');
    }

    pub fn row(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{v}");
        }
        self.text.push('\n');
    }

    pub fn text_row<I, T>(&mut self, fields: I)
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        self.push_fields(fields);
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn write_outputs(dir: &Path, csv: &Csv, report: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("result.csv"), csv.as_str())?;
    fs::write(dir.join("report.txt"), report)?;
    Ok(())
}

/// Report body preceded by the resolved configuration, each line commented.
pub fn report_with_header(command: &str, config: &str, body: &str) -> String {
    let mut out = format!("# erratic2bsde {command}\n#\n");
    for line in config.lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push('\n');
    out.push_str(body);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out
}
