//! Newline-delimited JSON persistence for samples, one sample per line:
//! `{"user_id":3,"values":[...],"finish":1,"skip":0}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::synth::Sample;
use crate::error::{Error, Result};

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("writing samples", e))?;
    }
    w.flush().map_err(|e| Error::io("writing samples", e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading samples", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if s.finish > 1 || s.skip > 1 {
            return Err(Error::Schema(format!("{}:{}: labels must be 0 or 1", path.display(), i + 1)));
        }
        out.push(s);
    }
    Ok(out)
}
