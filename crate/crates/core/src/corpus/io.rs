//! Line-oriented corpus and label files (UTF-8, one entry per line).

use std::fs;
use std::path::Path;

use super::synthetic::Style;
use crate::error::{Error, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<Style>> {
    read_lines(path)?.iter().map(|l| l.parse()).collect()
}

pub fn write_labels(path: &Path, labels: &[Style]) -> Result<()> {
    let tags: Vec<&str> = labels.iter().map(|s| s.tag()).collect();
    write_lines(path, &tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        let labels = vec![Style::Anti, Style::Target, Style::Neutral];
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        assert!(matches!(read_lines(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
