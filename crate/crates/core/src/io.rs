//! File helpers for the JSON and CSV artifacts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::SnapshotStore;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_store(path: &Path, store: &SnapshotStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    store.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<SnapshotStore> {
    SnapshotStore::read_csv(BufReader::new(File::open(path)?))
}

/// Training curve as `iteration,loss`.
pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty loss CSV".into()))??;
    if header.trim_end() != "iteration,loss" {
        return Err(Error::Data(format!("unexpected loss CSV header `{header}`")));
    }
    lines
        .map(|l| {
            let l = l?;
            let v = l.split(',').nth(1).ok_or_else(|| Error::Data(format!("bad loss row `{l}`")))?;
            v.parse().map_err(|_| Error::Data(format!("bad loss value `{v}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("training.csv");
        let v = vec![1.5, 0.25, 1.0 / 3.0];
        write_losses(&p, &v).unwrap();
        assert_eq!(read_losses(&p).unwrap(), v);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("iteration,loss\n0,"));
    }
}
