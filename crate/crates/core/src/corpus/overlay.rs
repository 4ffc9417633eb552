//! Noise overlay file: `index,clean_label,noisy_label`, one row per sample in
//! index order.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::NoisyCorpus;
use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["index", "clean_label", "noisy_label"];

/// Clean and corrupted labels for a whole training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseOverlay {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl NoiseOverlay {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Writes the overlay rows of `corpus` to `out`.
pub fn write_noise_overlay<W: Write>(corpus: &NoisyCorpus, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::io("writing noise overlay", std::io::Error::other(e));
    w.write_record(HEADER).map_err(to_err)?;
    for (i, (clean, noisy)) in corpus
        .clean_labels()
        .iter()
        .zip(corpus.noisy_labels())
        .enumerate()
    {
        w.write_record([i.to_string(), clean.to_string(), noisy.to_string()])
            .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::io("writing noise overlay", e))
}

pub fn save_noise_file(corpus: &NoisyCorpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_noise_overlay(corpus, file)
}

/// Reads an overlay, validating every row against `num_classes`.
pub fn load_noise_file(path: &Path, num_classes: usize) -> Result<NoiseOverlay> {
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(
            1,
            format!("expected header `{}`", HEADER.join(",")),
        ));
    }

    let mut overlay = NoiseOverlay {
        clean: Vec::new(),
        noisy: Vec::new(),
        flipped: Vec::new(),
    };
    for (expected_index, record) in reader.records().enumerate() {
        let line = expected_index + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |j: usize| -> Result<usize> {
            let raw = record
                .get(j)
                .ok_or_else(|| parse_err(line, format!("missing column `{}`", HEADER[j])))?;
            raw.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("`{raw}` is not a valid {}", HEADER[j])))
        };
        let (index, clean, noisy) = (field(0)?, field(1)?, field(2)?);
        if index != expected_index {
            return Err(parse_err(
                line,
                format!("index {index} out of order, expected {expected_index}"),
            ));
        }
        for (name, y) in [("clean_label", clean), ("noisy_label", noisy)] {
            if y >= num_classes {
                return Err(parse_err(
                    line,
                    format!("{name} {y} is outside 0..{num_classes}"),
                ));
            }
        }
        overlay.clean.push(clean);
        overlay.noisy.push(noisy);
        overlay.flipped.push(clean != noisy);
    }
    if overlay.is_empty() {
        return Err(parse_err(1, "overlay has no rows".into()));
    }
    Ok(overlay)
}
