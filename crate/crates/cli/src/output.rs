//! Deterministic file output: atomic writes, fixed float format, CSV with a
//! single `#` column-name header (units carried in the `_hz`/`_s` suffixes).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// All floating-point output goes through one format so golden files are
/// byte-stable: 15 significant digits of scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.15e}")
}

/// Write `contents` to `path` atomically: a temp file in the same directory
/// is renamed over the target, so readers never observe a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV buffer with a `#`-prefixed header line naming the columns.
pub struct Csv {
    buf: String,
    cols: usize,
    row_cells: usize,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "# {}", columns.join(","));
        Csv { buf, cols: columns.len(), row_cells: 0 }
    }

    pub fn cell_f64(&mut self, x: f64) -> &mut Self {
        self.push_cell(&fmt_f64(x))
    }

    pub fn cell_int(&mut self, x: i64) -> &mut Self {
        self.push_cell(&x.to_string())
    }

    pub fn cell_str(&mut self, s: &str) -> &mut Self {
        assert!(!s.contains(',') && !s.contains('\n'), "cell needs no quoting: {s:?}");
        self.push_cell(s)
    }

    fn push_cell(&mut self, s: &str) -> &mut Self {
        assert!(self.row_cells < self.cols, "row already has {} cells", self.cols);
        if self.row_cells > 0 {
            self.buf.push(',');
        }
        self.buf.push_str(s);
        self.row_cells += 1;
        self
    }

    pub fn end_row(&mut self) {
        assert_eq!(self.row_cells, self.cols, "row is missing cells");
        self.buf.push('\n');
        self.row_cells = 0;
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        assert_eq!(self.row_cells, 0, "unterminated row");
        write_atomic(path, &self.buf)
    }
}

/// Serialize a summary value as pretty JSON and write it atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> io::Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    write_atomic(path, &format!("{text}\n"))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut csv = Csv::new(&["a_hz", "b"]);
        csv.cell_f64(1.5).cell_int(2);
        csv.end_row();
        csv.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# a_hz,b\n1.5e0,2\n");
        // no temp file left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    #[should_panic(expected = "missing cells")]
    fn csv_rejects_short_rows() {
        let mut csv = Csv::new(&["a", "b"]);
        csv.cell_int(1);
        csv.end_row();
    }
}
