use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, ',' | ' ' | '=') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Formats `measurement,tag=v field=value timestamp_ns`.
pub fn line(measurement: &str, tags: &[(&str, &str)], fields: &[(&str, f64)], ts_seconds: f64) -> String {
    let mut out = escape(measurement);
    for (k, v) in tags {
        out.push(',');
        out.push_str(&escape(k));
        out.push('=');
        out.push_str(&escape(v));
    }
    out.push(' ');
    let fields: Vec<String> = fields
        .iter()
        .map(|(k, v)| format!("{}={}", escape(k), super::metrics::format_value(*v)))
        .collect();
    out.push_str(&fields.join(","));
    out.push_str(&format!(" {}", (ts_seconds * 1e9).round() as i64));
    out
}

/// Append-only line-protocol file, one measurement per line.
#[derive(Debug)]
pub struct LineProtocolSink {
    file: Mutex<File>,
}

impl LineProtocolSink {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LineProtocolSink {
            file: Mutex::new(file),
        })
    }

    pub fn write(
        &self,
        measurement: &str,
        tags: &[(&str, &str)],
        fields: &[(&str, f64)],
        ts_seconds: f64,
    ) -> io::Result<()> {
        let mut f = self.file.lock().unwrap();
        writeln!(f, "{}", line(measurement, tags, fields, ts_seconds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_and_escapes() {
        assert_eq!(
            line("qpu_calibration", &[("resource", "pasqal 0")], &[("max_amplitude", 12.5)], 2.0),
            "qpu_calibration,resource=pasqal\\ 0 max_amplitude=12.5 2000000000"
        );
    }
}
