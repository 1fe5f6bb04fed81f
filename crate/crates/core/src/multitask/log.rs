//! Per-epoch prediction records and metric rows, with their text formats.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::data::Split;

/// A prediction or target cell of the prediction log.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Predicted class with its softmax probability, written `class:confidence`.
    Class { class: usize, confidence: f32 },
    /// True class, written as the bare index.
    Label(usize),
    /// Regressed values, `;`-separated.
    Values(Vec<f32>),
    /// Class map, run-length encoded as `rle:HxW:c*n;c*n;...` in row-major order.
    ClassMap {
        height: usize,
        width: usize,
        classes: Vec<u8>,
    },
    /// Per-pixel values, `map:HxW:v;v;...`.
    ValueMap {
        height: usize,
        width: usize,
        values: Vec<f32>,
    },
}

impl Payload {
    /// The class carried by a classification payload.
    pub fn class(&self) -> Option<usize> {
        match *self {
            Payload::Class { class, .. } | Payload::Label(class) => Some(class),
            _ => None,
        }
    }

    /// First regressed value of a value payload.
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Payload::Values(v) => v.first().map(|&x| x as f64),
            _ => None,
        }
    }

    pub fn encode(&self) -> String {
        let join = |v: &[f32]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        match self {
            Payload::Class { class, confidence } => format!("{class}:{confidence:?}"),
            Payload::Label(c) => c.to_string(),
            Payload::Values(v) => join(v),
            Payload::ClassMap {
                height,
                width,
                classes,
            } => {
                let mut s = format!("rle:{height}x{width}:");
                let mut i = 0;
                while i < classes.len() {
                    let c = classes[i];
                    let run = classes[i..].iter().take_while(|&&x| x == c).count();
                    if i > 0 {
                        s.push(';');
                    }
                    let _ = write!(s, "{c}*{run}");
                    i += run;
                }
                s
            }
            Payload::ValueMap {
                height,
                width,
                values,
            } => format!("map:{height}x{width}:{}", join(values)),
        }
    }

    pub fn decode(s: &str) -> Result<Payload> {
        let bad = || Error::format("prediction log", format!("bad payload `{s}`"));
        let floats = |body: &str| -> Result<Vec<f32>> {
            if body.is_empty() {
                return Ok(Vec::new());
            }
            body.split(';')
                .map(|x| x.parse::<f32>().map_err(|_| bad()))
                .collect()
        };
        let extent = |ext: &str| -> Result<(usize, usize)> {
            let (h, w) = ext.split_once('x').ok_or_else(bad)?;
            Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
        };
        if let Some(rest) = s.strip_prefix("rle:") {
            let (ext, body) = rest.split_once(':').ok_or_else(bad)?;
            let (height, width) = extent(ext)?;
            let mut classes = Vec::with_capacity(height * width);
            for run in body.split(';').filter(|r| !r.is_empty()) {
                let (c, n) = run.split_once('*').ok_or_else(bad)?;
                let c: u8 = c.parse().map_err(|_| bad())?;
                let n: usize = n.parse().map_err(|_| bad())?;
                classes.extend(std::iter::repeat_n(c, n));
            }
            if classes.len() != height * width {
                return Err(bad());
            }
            return Ok(Payload::ClassMap {
                height,
                width,
                classes,
            });
        }
        if let Some(rest) = s.strip_prefix("map:") {
            let (ext, body) = rest.split_once(':').ok_or_else(bad)?;
            let (height, width) = extent(ext)?;
            let values = floats(body)?;
            if values.len() != height * width {
                return Err(bad());
            }
            return Ok(Payload::ValueMap {
                height,
                width,
                values,
            });
        }
        if let Some((c, p)) = s.split_once(':') {
            return Ok(Payload::Class {
                class: c.parse().map_err(|_| bad())?,
                confidence: p.parse().map_err(|_| bad())?,
            });
        }
        if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
            return Ok(Payload::Label(s.parse().map_err(|_| bad())?));
        }
        floats(s).map(Payload::Values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub sample_id: usize,
    pub group_id: usize,
    pub task: String,
    pub pred: Payload,
    pub target: Payload,
}

pub const LOG_HEADER: &str = "epoch,sample_id,group_id,task,pred,target";

/// Every evaluated prediction of a run, in (epoch, split, sample, task) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionLog {
    pub rows: Vec<LogRow>,
}

impl PredictionLog {
    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.rows.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn tasks(&self) -> Vec<&str> {
        let mut t: Vec<&str> = self.rows.iter().map(|r| r.task.as_str()).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.rows.iter().any(|r| r.task == task)
    }

    pub fn rows_for<'a>(
        &'a self,
        epoch: usize,
        task: &'a str,
    ) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.epoch == epoch && r.task == task)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * self.rows.len() + LOG_HEADER.len());
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.sample_id,
                r.group_id,
                r.task,
                r.pred.encode(),
                r.target.encode()
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::format("prediction log", "unexpected header"));
        }
        let rows = lines
            .enumerate()
            .map(|(n, line)| {
                let bad = || Error::format("prediction log", format!("line {}", n + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
                Ok(LogRow {
                    epoch: num(f[0])?,
                    sample_id: num(f[1])?,
                    group_id: num(f[2])?,
                    task: f[3].to_string(),
                    pred: Payload::decode(f[4])?,
                    target: Payload::decode(f[5])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionLog { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,task,metric,value";

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.split.name(),
            r.task,
            r.metric,
            r.value
        );
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics csv", "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::format("metrics csv", format!("line {}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: Split::parse(f[1]).ok_or_else(bad)?,
                task: f[2].to_string(),
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_roundtrip() {
        let cases = [
            Payload::Class {
                class: 2,
                confidence: 0.875,
            },
            Payload::Label(3),
            Payload::Values(vec![4.25, -1e-7]),
            Payload::Values(vec![3.0]),
            Payload::ClassMap {
                height: 2,
                width: 3,
                classes: vec![1, 1, 1, 0, 4, 4],
            },
            Payload::ValueMap {
                height: 1,
                width: 2,
                values: vec![0.5, 0.25],
            },
        ];
        for p in cases {
            assert_eq!(Payload::decode(&p.encode()).unwrap(), p, "{}", p.encode());
        }
        assert_eq!(
            Payload::ClassMap {
                height: 2,
                width: 2,
                classes: vec![0, 0, 0, 1]
            }
            .encode(),
            "rle:2x2:0*3;1*1"
        );
        assert!(Payload::decode("rle:2x2:0*3").is_err());
    }

    #[test]
    fn log_and_metrics_roundtrip() {
        let log = PredictionLog {
            rows: vec![LogRow {
                epoch: 0,
                sample_id: 7,
                group_id: 1,
                task: "crop".into(),
                pred: Payload::Class {
                    class: 1,
                    confidence: 0.6,
                },
                target: Payload::Label(1),
            }],
        };
        let text = log.to_csv();
        assert!(text.starts_with("epoch,sample_id,group_id,task,pred,target\n"));
        assert_eq!(PredictionLog::from_csv(&text).unwrap(), log);
        let m = vec![MetricRow {
            epoch: 3,
            split: Split::Val,
            task: "yield".into(),
            metric: "r2".into(),
            value: 0.8125,
        }];
        let text = metrics_to_csv(&m);
        assert_eq!(
            text,
            "epoch,split,task,metric,value\n3,val,yield,r2,0.8125\n"
        );
        assert_eq!(metrics_from_csv(&text).unwrap(), m);
    }
}
