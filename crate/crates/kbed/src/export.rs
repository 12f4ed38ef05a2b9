//! Artifact writers: ASCII PGM images (diffable, dependency-free) and CSV
//! dumps of masks and particle ensembles.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::diffusion::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::mask::{MaskField, MaskMode};

/// P2 (ASCII) PGM, min-max normalized to 0..255. A constant image maps to 0.
pub fn write_pgm(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (rows, cols) = data.dim();
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = String::with_capacity(rows * cols * 4 + 32);
    out.push_str(&format!("P2\n{cols} {rows}\n255\n"));
    for r in 0..rows {
        let mut line = String::new();
        for c in 0..cols {
            let v = ((data[[r, c]] - lo) * scale).round().clamp(0.0, 255.0) as u8;
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        out.push_str(&line);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Hard masks as exact 0/255 PGM; soft masks go through [`write_mask_csv`].
pub fn write_mask_pgm(path: &Path, mask: &MaskField) -> Result<()> {
    match mask.mode() {
        MaskMode::Hard => {
            let img = mask.weights().mapv(|w| w * 255.0);
            let (rows, cols) = img.dim();
            let mut out = String::with_capacity(rows * cols * 4 + 32);
            out.push_str(&format!("P2\n{cols} {rows}\n255\n"));
            for r in 0..rows {
                let line: Vec<String> =
                    (0..cols).map(|c| (img[[r, c]] as u8).to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            std::fs::write(path, out)?;
            Ok(())
        }
        MaskMode::Soft => Err(Error::InvalidParameter(
            "soft masks export to CSV, not PGM".into(),
        )),
    }
}

/// One CSV row per mask row.
pub fn write_mask_csv(path: &Path, mask: &MaskField) -> Result<()> {
    let w = mask.weights();
    let mut out = String::new();
    for r in 0..mask.rows() {
        let line: Vec<String> = (0..mask.cols()).map(|c| format!("{:.12e}", w[[r, c]])).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One CSV row per particle.
pub fn write_ensemble_csv(path: &Path, ensemble: &ParticleEnsemble) -> Result<()> {
    let mut out = String::new();
    for state in ensemble.states() {
        let line: Vec<String> = state.iter().map(|v| format!("{v:.12e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a P2 PGM back as doubles scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    let bad = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let text = std::fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split_whitespace());
    if tokens.next() != Some("P2") {
        return Err(bad("expected a P2 header"));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing {what}")))
    };
    let cols = next_usize("width")?;
    let rows = next_usize("height")?;
    let maxval = next_usize("maxval")? as f64;
    if maxval <= 0.0 {
        return Err(bad("non-positive maxval"));
    }
    let mut data = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            data[[r, c]] = next_usize("pixel")? as f64 / maxval;
        }
    }
    Ok(data)
}
