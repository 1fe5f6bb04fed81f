use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{Payload, PredictionLog};

/// Distinct colour for class `c`.
pub fn palette(c: usize) -> [u8; 3] {
    let h = (c as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = if c.is_multiple_of(2) { 230.0 } else { 150.0 };
    [(r * v) as u8, (g * v) as u8, (b * v) as u8]
}

fn pgm(h: usize, w: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

fn ppm(h: usize, w: usize, classes: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &c in classes {
        out.extend_from_slice(&palette(c as usize));
    }
    out
}

fn scale(values: &[f32], lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    values
        .iter()
        .map(|&v| (((v as f64 - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStat {
    pub task: String,
    /// `class_map` or `value_map`.
    pub kind: String,
    pub files: Vec<String>,
    /// Mean of the misclassification mask, or mean absolute error.
    pub mean_error: f64,
    /// Per-sample accuracy of a class map.
    pub accuracy: Option<f64>,
    /// Value range used to scale value maps and error maps.
    pub range: Option<(f64, f64)>,
    pub max_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapBundle {
    pub sample_id: usize,
    pub epoch: usize,
    pub maps: Vec<MapStat>,
    /// Colour per class index used by the class maps.
    pub palette: Vec<[u8; 3]>,
}

/// Writes target, prediction and error images for every map task logged
/// for `sample_id` at `epoch`, plus a `legend.json`.
pub fn error_map_export(
    log: &PredictionLog,
    sample_id: usize,
    epoch: usize,
    dir: &Path,
) -> Result<MapBundle> {
    let rows: Vec<_> = log
        .rows
        .iter()
        .filter(|r| r.sample_id == sample_id && r.epoch == epoch)
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample {sample_id} is not logged at epoch {epoch}"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, bytes: Vec<u8>| -> Result<String> {
        let p: PathBuf = dir.join(&name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(name)
    };
    let mut maps = Vec::new();
    let mut max_class = 0usize;
    for r in rows {
        match (&r.pred, &r.target) {
            (
                Payload::ClassMap {
                    height,
                    width,
                    classes: p,
                },
                Payload::ClassMap { classes: t, .. },
            ) => {
                let (h, w) = (*height, *width);
                let mask: Vec<u8> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| if a == b { 0 } else { 255 })
                    .collect();
                let wrong = mask.iter().filter(|&&m| m != 0).count() as f64 / mask.len() as f64;
                max_class =
                    max_class.max(p.iter().chain(t).map(|&c| c as usize).max().unwrap_or(0));
                let files = vec![
                    write(format!("{}_target.ppm", r.task), ppm(h, w, t))?,
                    write(format!("{}_pred.ppm", r.task), ppm(h, w, p))?,
                    write(format!("{}_mask.pgm", r.task), pgm(h, w, &mask))?,
                ];
                maps.push(MapStat {
                    task: r.task.clone(),
                    kind: "class_map".into(),
                    files,
                    mean_error: wrong,
                    accuracy: Some(1.0 - wrong),
                    range: None,
                    max_error: None,
                });
            }
            (
                Payload::ValueMap {
                    height,
                    width,
                    values: p,
                },
                Payload::ValueMap { values: t, .. },
            ) => {
                let (h, w) = (*height, *width);
                let (lo, hi) = t
                    .iter()
                    .chain(p)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| {
                        (l.min(v as f64), u.max(v as f64))
                    });
                let err: Vec<f32> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| (a as f64 - b as f64).abs() as f32)
                    .collect();
                let mae = err.iter().map(|&e| e as f64).sum::<f64>() / err.len() as f64;
                let max_err = err.iter().cloned().fold(0.0f32, f32::max) as f64;
                let files = vec![
                    write(
                        format!("{}_target.pgm", r.task),
                        pgm(h, w, &scale(t, lo, hi)),
                    )?,
                    write(format!("{}_pred.pgm", r.task), pgm(h, w, &scale(p, lo, hi)))?,
                    write(
                        format!("{}_abs_error.pgm", r.task),
                        pgm(h, w, &scale(&err, 0.0, max_err)),
                    )?,
                ];
                maps.push(MapStat {
                    task: r.task.clone(),
                    kind: "value_map".into(),
                    files,
                    mean_error: mae,
                    accuracy: None,
                    range: Some((lo, hi)),
                    max_error: Some(max_err),
                });
            }
            _ => {}
        }
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample {sample_id} has no map predictions"
        )));
    }
    let bundle = MapBundle {
        sample_id,
        epoch,
        maps,
        palette: (0..=max_class).map(palette).collect(),
    };
    let legend = dir.join("legend.json");
    std::fs::write(&legend, serde_json::to_string_pretty(&bundle)? + "\n")
        .map_err(|e| Error::io(&legend, e))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::LogRow;

    #[test]
    fn exports_maps_and_legend() {
        let dir = tempfile::tempdir().unwrap();
        let log = PredictionLog {
            rows: vec![
                LogRow {
                    epoch: 2,
                    sample_id: 5,
                    group_id: 5,
                    task: "lulc".into(),
                    pred: Payload::ClassMap {
                        height: 2,
                        width: 2,
                        classes: vec![0, 1, 1, 2],
                    },
                    target: Payload::ClassMap {
                        height: 2,
                        width: 2,
                        classes: vec![0, 1, 2, 2],
                    },
                },
                LogRow {
                    epoch: 2,
                    sample_id: 5,
                    group_id: 5,
                    task: "elevation".into(),
                    pred: Payload::ValueMap {
                        height: 2,
                        width: 2,
                        values: vec![0.0, 1.0, 2.0, 3.0],
                    },
                    target: Payload::ValueMap {
                        height: 2,
                        width: 2,
                        values: vec![0.0, 1.0, 2.0, 5.0],
                    },
                },
            ],
        };
        let b = error_map_export(&log, 5, 2, dir.path()).unwrap();
        assert_eq!(b.maps.len(), 2);
        assert!((b.maps[0].mean_error - 0.25).abs() < 1e-12);
        assert!((b.maps[1].mean_error - 0.5).abs() < 1e-12);
        let mask = std::fs::read(dir.path().join("lulc_mask.pgm")).unwrap();
        assert_eq!(&mask[mask.len() - 4..], &[0, 0, 255, 0]);
        let err = std::fs::read(dir.path().join("elevation_abs_error.pgm")).unwrap();
        assert_eq!(&err[err.len() - 4..], &[0, 0, 0, 255]);
        assert!(dir.path().join("legend.json").exists());
        assert!(error_map_export(&log, 6, 2, dir.path()).is_err());
    }
}
