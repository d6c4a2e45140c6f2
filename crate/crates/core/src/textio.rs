//! Small helpers shared by the plain-text file formats.

use std::fs;
use std::io;
use std::path::Path;

/// Scientific notation with 17 significant digits (exact round trip).
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn join_row<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut line = String::new();
    for (k, v) in values.into_iter().enumerate() {
        if k > 0 {
            line.push(' ');
        }
        line.push_str(&fmt_f64(*v));
    }
    line
}

pub(crate) fn parse_row(line: &str) -> Result<Vec<f64>, std::num::ParseFloatError> {
    line.split_ascii_whitespace().map(str::parse).collect()
}

/// Writes `contents` next to `path` under a temporary name, then renames it
/// into place so readers never observe a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}
