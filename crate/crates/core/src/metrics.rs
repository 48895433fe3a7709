//! Evaluation metrics (NSS, KLD, CC, SIM) and per-clip reports.

use std::io::{Read, Write};

use thiserror::Error;

use crate::losses::{self, LossError, DEFAULT_EPS};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("map sizes differ: {0} vs {1}")]
    Size(usize, usize),
    #[error("fixation map is empty")]
    NoFixations,
    #[error("map has zero mass")]
    ZeroMass,
    #[error("sequence lengths differ: {0}")]
    Length(String),
    #[error("report csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricError::Size(a.len(), b.len()));
    }
    Ok(())
}

fn sum_normalized(x: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = x.iter().sum();
    if s <= 0.0 {
        return Err(MetricError::ZeroMass);
    }
    Ok(x.iter().map(|v| v / s).collect())
}

/// NSS score and whether the prediction was flat (score forced to 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nss {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean z-score of `p` at fixation pixels, population std.
pub fn nss(p: &[f64], fixations: &[f64]) -> Result<Nss> {
    check(p, fixations)?;
    let idx: Vec<usize> = (0..p.len()).filter(|&i| fixations[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(MetricError::NoFixations);
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        log::warn!("nss on a constant map; reporting 0");
        return Ok(Nss {
            value: 0.0,
            degenerate: true,
        });
    }
    let std = var.sqrt();
    let value = idx.iter().map(|&i| (p[i] - mean) / std).sum::<f64>() / idx.len() as f64;
    Ok(Nss {
        value,
        degenerate: false,
    })
}

fn graph_pair(g: &mut Graph, a: &[f64], b: &[f64]) -> (crate::tensor::Var, crate::tensor::Var) {
    let va = g.constant(Tensor::new(vec![a.len()], a.to_vec()).expect("1d"));
    let vb = g.constant(Tensor::new(vec![b.len()], b.to_vec()).expect("1d"));
    (va, vb)
}

/// KL divergence of `p` from `q` after sum-normalising both.
pub fn kld(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    let (p, q) = (sum_normalized(p)?, sum_normalized(q)?);
    let mut g = Graph::new();
    let (vp, vq) = graph_pair(&mut g, &p, &q);
    let out = losses::kld_loss(&mut g, vp, vq, DEFAULT_EPS)?;
    Ok(g.value(out).item())
}

/// Pearson correlation, defined as `1 - cc_loss`.
pub fn cc(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    let mut g = Graph::new();
    let (vp, vq) = graph_pair(&mut g, p, q);
    let out = losses::cc_loss(&mut g, vp, vq)?;
    Ok(1.0 - g.value(out).item())
}

/// Histogram intersection of the sum-normalised maps.
pub fn sim(p: &[f64], q: &[f64]) -> Result<f64> {
    check(p, q)?;
    let (p, q) = (sum_normalized(p)?, sum_normalized(q)?);
    Ok(p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame_id: String,
    pub nss: f64,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
    /// Fraction of pixels scored; 1 when no coverage mask was given.
    pub coverage: f64,
    /// Frames whose NSS was forced to 0 on a constant prediction.
    pub degenerate_nss: Vec<String>,
}

pub struct FrameInput<'a> {
    pub frame_id: String,
    pub prediction: &'a [f64],
    pub density: &'a [f64],
    pub fixations: &'a [f64],
}

fn select(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).collect(),
        None => x.to_vec(),
    }
}

/// Scores each frame, restricted to `covered` pixels when given.
pub fn evaluate_batch(frames: &[FrameInput<'_>], covered: Option<&[bool]>) -> Result<MetricReport> {
    if frames.is_empty() {
        return Err(MetricError::Length("no frames".into()));
    }
    let mut rows = Vec::with_capacity(frames.len());
    let mut degenerate = Vec::new();
    let mut coverage = 1.0;
    for f in frames {
        check(f.prediction, f.density)?;
        check(f.prediction, f.fixations)?;
        if let Some(m) = covered {
            if m.len() != f.prediction.len() {
                return Err(MetricError::Length(format!(
                    "coverage mask has {} pixels, frame {} has {}",
                    m.len(),
                    f.frame_id,
                    f.prediction.len()
                )));
            }
            coverage = m.iter().filter(|&&k| k).count() as f64 / m.len() as f64;
        }
        let p = select(f.prediction, covered);
        let q = select(f.density, covered);
        let fx = select(f.fixations, covered);
        let n = nss(&p, &fx)?;
        if n.degenerate {
            degenerate.push(f.frame_id.clone());
        }
        rows.push(FrameMetrics {
            frame_id: f.frame_id.clone(),
            nss: n.value,
            kld: kld(&p, &q)?,
            cc: cc(&p, &q)?,
            sim: sim(&p, &q)?,
        });
    }
    let mean = mean_row(&rows);
    Ok(MetricReport {
        frames: rows,
        mean,
        coverage,
        degenerate_nss: degenerate,
    })
}

fn mean_row(rows: &[FrameMetrics]) -> FrameMetrics {
    let n = rows.len() as f64;
    let avg = |f: fn(&FrameMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    FrameMetrics {
        frame_id: "mean".into(),
        nss: avg(|r| r.nss),
        kld: avg(|r| r.kld),
        cc: avg(|r| r.cc),
        sim: avg(|r| r.sim),
    }
}

const HEADER: [&str; 5] = ["frame_id", "nss", "kld", "cc", "sim"];

impl MetricReport {
    /// One row per frame then a `mean` row; floats use shortest round-trip
    /// formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| MetricError::Csv(e.to_string());
        out.write_record(HEADER).map_err(err)?;
        for r in self.frames.iter().chain(std::iter::once(&self.mean)) {
            out.write_record([
                r.frame_id.clone(),
                r.nss.to_string(),
                r.kld.to_string(),
                r.cc.to_string(),
                r.sim.to_string(),
            ])
            .map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a report written by [`MetricReport::write_csv`]; coverage and
    /// flags are not stored in the CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| MetricError::Csv(e.to_string()))?;
        if headers.iter().ne(HEADER) {
            return Err(MetricError::Csv(format!("unexpected header {headers:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MetricError::Csv(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| MetricError::Csv(format!("bad number {:?}", &rec[i])))
            };
            rows.push(FrameMetrics {
                frame_id: rec[0].to_string(),
                nss: num(1)?,
                kld: num(2)?,
                cc: num(3)?,
                sim: num(4)?,
            });
        }
        let mean = match rows.pop() {
            Some(m) if m.frame_id == "mean" => m,
            _ => return Err(MetricError::Csv("missing mean row".into())),
        };
        Ok(Self {
            frames: rows,
            mean,
            coverage: 1.0,
            degenerate_nss: Vec::new(),
        })
    }
}
