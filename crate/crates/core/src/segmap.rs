//! Integer label maps and their PGM encoding.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};

/// Label value for pixels that carry no category.
pub const UNLABELED: u8 = 255;

/// Row-major `[H, W]` map of category ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(PftError::Shape {
                op: "label_map",
                lhs: vec![height, width],
                rhs: vec![labels.len()],
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Binary P5 PGM with max value 255.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(PftError::Data("truncated PGM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P5" || header[3] != "255" {
            return Err(PftError::Data("expected an 8-bit P5 PGM".into()));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| PftError::Data(format!("bad PGM size '{s}'")));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let mut labels = vec![0u8; width * height];
        reader.read_exact(&mut labels)?;
        Self::new(height, width, labels)
    }
}

/// Writes `values` (`[H, W]`) as an 8-bit PGM after min-max scaling to [0, 1].
pub fn write_normalized_pgm<W: Write>(mut out: W, values: &[f64], height: usize, width: usize) -> Result<()> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            let t = if range > 0.0 { (v - lo) / range } else { 0.0 };
            (t * 255.0).round() as u8
        })
        .collect();
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(&bytes)?;
    Ok(())
}
