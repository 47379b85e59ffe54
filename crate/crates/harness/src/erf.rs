//! Averaged effective receptive field maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use a2mamba::decoder::write_pgm;
use a2mamba::model::{erf_map, erf_reach_fraction, support_fraction, Model};
use a2mamba::rng::SeededRng;
use a2mamba::{Result, Tensor};

/// Values at or below this count as outside the receptive field.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ErfReport {
    /// `[H, W]`, maximum 1.
    pub map: Tensor,
    pub support: f64,
    /// Share of the image inside the analytic reach bound.
    pub reach: f64,
}

/// Mean of [`erf_map`] over `samples` standard-normal inputs, rescaled to
/// maximum 1.
pub fn average_erf(model: &Model, samples: usize, res: usize, seed: u64) -> Result<ErfReport> {
    let mut rng = SeededRng::derive(seed, 0xe4f);
    let mut acc = Tensor::zeros(&[res, res]);
    for _ in 0..samples.max(1) {
        let x = rng.normal_tensor(&[1, 3, res, res], 1.0);
        acc.add_assign(&erf_map(model, &x)?);
    }
    let peak = acc.max_abs();
    let map = if peak > 0.0 {
        acc.map(|v| v / peak)
    } else {
        acc
    };
    Ok(ErfReport {
        support: support_fraction(&map, SUPPORT_THRESHOLD),
        reach: erf_reach_fraction(&model.config, res, res),
        map,
    })
}

/// `<prefix>.pgm` (8-bit, scaled to 255) and `<prefix>.csv` (one image row
/// per line).
pub fn write_erf(prefix: &Path, report: &ErfReport) -> Result<(PathBuf, PathBuf)> {
    let base = prefix.as_os_str().to_string_lossy().into_owned();
    let (pgm, csv) = (
        PathBuf::from(format!("{base}.pgm")),
        PathBuf::from(format!("{base}.csv")),
    );
    let (h, w) = (report.map.shape()[0], report.map.shape()[1]);
    let pixels: Vec<u16> = report
        .map
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u16)
        .collect();
    write_pgm(&pgm, w, h, &pixels, 255)?;
    let mut text = String::new();
    for row in report.map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(text, "{}", cells.join(",")).unwrap();
    }
    std::fs::write(&csv, text)?;
    Ok((pgm, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use a2mamba::block::MixerConfig;
    use a2mamba::model::{build_model, ModelConfig};

    #[test]
    fn outputs_match_the_input_resolution() {
        let model = build_model(&ModelConfig::toy(), 0).unwrap();
        let report = average_erf(&model, 2, 64, 0).unwrap();
        assert!((report.map.max_abs() - 1.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let (pgm, csv) = write_erf(&dir.path().join("erf"), &report).unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64 * 64);
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 64);
        assert!(text.lines().all(|l| l.split(',').count() == 64));
    }

    #[test]
    fn attention_only_support_is_within_reach() {
        let cfg = ModelConfig::toy().with_mixer(MixerConfig::attention_only());
        let model = build_model(&cfg, 0).unwrap();
        let report = average_erf(&model, 2, 64, 1).unwrap();
        assert!(report.support <= report.reach);
    }
}
