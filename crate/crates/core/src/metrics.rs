//! Area under the rank-accuracy curve.
//!
//! AURAC integrates the piecewise-linear score curve over rank by the
//! trapezoidal rule and divides by the rank span, so a flat curve at `c`
//! scores exactly `c`. log-AURAC does the same on `log₂(rank)`, which gives
//! every doubling interval equal weight.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// `(rank, score)` points, strictly ascending in rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankAccuracyCurve {
    points: Vec<(usize, f64)>,
}

impl RankAccuracyCurve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("curve needs at least one point".into()));
        }
        if let Some(&(r, _)) = points.iter().find(|(r, _)| *r == 0) {
            return Err(Error::InvalidArgument(format!("rank {r} must be at least 1")));
        }
        if let Some(&(r, s)) = points.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("score {s} at rank {r} is not finite")));
        }
        if let Some(w) = points.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(format!(
                "ranks must be strictly ascending, found {} before {}",
                w[0].0, w[1].0
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses `rank,score` CSV (header required, one row per rank, ascending).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "rank,score" => {}
            Some((_, header)) => {
                return Err(Error::Csv {
                    line: 1,
                    message: format!("expected header 'rank,score', got '{header}'"),
                })
            }
            None => {
                return Err(Error::Csv {
                    line: 1,
                    message: "empty input".into(),
                })
            }
        }
        let mut points = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let mut fields = raw.split(',');
            let (Some(r), Some(s), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Csv {
                    line,
                    message: format!("expected two fields, got '{raw}'"),
                });
            };
            let rank: usize = r.trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("invalid rank '{r}'"),
            })?;
            let score: f64 = s.trim().parse().map_err(|_| Error::Csv {
                line,
                message: format!("invalid score '{s}'"),
            })?;
            if rank == 0 {
                return Err(Error::Csv {
                    line,
                    message: "rank must be at least 1".into(),
                });
            }
            if !score.is_finite() {
                return Err(Error::Csv {
                    line,
                    message: format!("score '{s}' is not finite"),
                });
            }
            if let Some(&(prev, _)) = points.last() {
                if rank <= prev {
                    return Err(Error::Csv {
                        line,
                        message: format!("rank {rank} does not ascend after {prev}"),
                    });
                }
            }
            points.push((rank, score));
        }
        if points.is_empty() {
            return Err(Error::Csv {
                line: 2,
                message: "no data rows".into(),
            });
        }
        Self::new(points)
    }

    /// `rank,score` CSV with full-precision scores and LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,score\n");
        for (r, s) in &self.points {
            let _ = writeln!(out, "{r},{s}");
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn trapezoid(points: &[(usize, f64)], coord: impl Fn(usize) -> f64) -> f64 {
    if points.len() == 1 {
        return points[0].1;
    }
    let span = coord(points[points.len() - 1].0) - coord(points[0].0);
    let area: f64 = points
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (coord(w[1].0) - coord(w[0].0)))
        .sum();
    area / span
}

/// Normalized trapezoidal area over linear rank. A single point returns its score.
pub fn aurac(curve: &RankAccuracyCurve) -> f64 {
    trapezoid(&curve.points, |r| r as f64)
}

/// Normalized trapezoidal area over `log₂(rank)`. A single point returns its score.
pub fn log_aurac(curve: &RankAccuracyCurve) -> f64 {
    trapezoid(&curve.points, |r| (r as f64).log2())
}

/// Share of the AURAC normalization carried by interval `i` (between points
/// `i` and `i+1`): `(r_{i+1} − r_i) / (r_last − r_first)`.
pub fn interval_weight(curve: &RankAccuracyCurve, i: usize) -> Result<f64> {
    let pts = &curve.points;
    if i + 1 >= pts.len() {
        return Err(Error::InvalidArgument(format!(
            "interval {i} out of range for a curve with {} points",
            pts.len()
        )));
    }
    let span = (pts[pts.len() - 1].0 - pts[0].0) as f64;
    Ok((pts[i + 1].0 - pts[i].0) as f64 / span)
}
