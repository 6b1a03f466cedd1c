//! Power-law fits `y ~ C x^slope` on log-log axes.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::measure::random_index;
use crate::rng;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x05ee_df17;

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; `None` below three points.
    pub r_squared: Option<f64>,
    /// 95% percentile bootstrap interval for the slope.
    pub slope_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub message: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", if self.pass { "PASS" } else { "FAIL" }, self.message)
    }
}

struct Line {
    slope: f64,
    intercept: f64,
}

fn wls(lx: &[f64], ly: &[f64], w: &[f64]) -> Option<Line> {
    let sw: f64 = w.iter().sum();
    let mx = lx.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = ly.iter().zip(w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..lx.len() {
        let dx = lx[i] - mx;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (ly[i] - my);
    }
    if sxx <= 1e-14 * (1.0 + mx * mx) * sw {
        return None;
    }
    let slope = sxy / sxx;
    Some(Line {
        slope,
        intercept: my - slope * mx,
    })
}

/// Least squares on `(ln x, ln y)` with an optional inverse-variance weight per point.
pub fn loglog_fit(points: &[(f64, f64)], weights: Option<&[f64]>) -> Result<RateFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: points.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: w.len(),
            });
        }
        if w.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidWeights("fit weights must be positive".into()));
        }
    }
    if let Some(bad) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain(format!("log-log fit needs positive finite data, got {bad:?}")));
    }
    // canonical order makes the result independent of input order
    let mut data: Vec<(f64, f64, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| (x, y, weights.map_or(1.0, |w| w[i])))
        .collect();
    data.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let lx: Vec<f64> = data.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = data.iter().map(|p| p.1.ln()).collect();
    let w: Vec<f64> = data.iter().map(|p| p.2).collect();
    let line = wls(&lx, &ly, &w).ok_or_else(|| Error::Domain("all x values coincide".into()))?;

    let r_squared = (data.len() >= 3).then(|| {
        let sw: f64 = w.iter().sum();
        let my = ly.iter().zip(&w).map(|(y, w)| w * y).sum::<f64>() / sw;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..ly.len() {
            let fit = line.intercept + line.slope * lx[i];
            ss_res += w[i] * (ly[i] - fit).powi(2);
            ss_tot += w[i] * (ly[i] - my).powi(2);
        }
        if ss_tot > 0.0 {
            (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
        } else {
            1.0
        }
    });

    let k = data.len();
    let mut rng = rng::stream(BOOTSTRAP_SEED, 0, 0);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let (mut bx, mut by, mut bw) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for t in 0..k {
            let i = random_index(&mut rng, k);
            bx[t] = lx[i];
            by[t] = ly[i];
            bw[t] = w[i];
        }
        // resamples that hit a single x value carry no slope information
        if let Some(l) = wls(&bx, &by, &bw) {
            slopes.push(l.slope);
        }
    }
    let slope_ci = if slopes.is_empty() {
        (line.slope, line.slope)
    } else {
        slopes.sort_by(f64::total_cmp);
        let q = |p: f64| slopes[((p * (slopes.len() - 1) as f64).round()) as usize];
        (q(0.025).min(line.slope), q(0.975).max(line.slope))
    };
    Ok(RateFit {
        slope: line.slope,
        intercept: line.intercept,
        r_squared,
        slope_ci,
    })
}

/// Pass iff `|slope - target| <= tolerance` and the interval widened by `tolerance / 2`
/// contains the target.
pub fn verdict(fit: &RateFit, target_slope: f64, tolerance: f64) -> Verdict {
    let close = (fit.slope - target_slope).abs() <= tolerance;
    let (lo, hi) = (fit.slope_ci.0 - tolerance / 2.0, fit.slope_ci.1 + tolerance / 2.0);
    let covered = lo <= target_slope && target_slope <= hi;
    let pass = close && covered;
    let mut message = format!(
        "slope {:.4} (95% CI [{:.4}, {:.4}]) vs target {} +/- {}",
        fit.slope, fit.slope_ci.0, fit.slope_ci.1, target_slope, tolerance
    );
    if !close {
        message.push_str("; slope outside tolerance");
    }
    if !covered {
        message.push_str("; target outside widened interval");
    }
    Verdict { pass, message }
}

/// Reads two named numeric columns from a CSV file with a header row.
pub fn read_columns(path: &Path, x_column: &str, y_column: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} not found in {}", path.display())))
    };
    let (xi, yi) = (find(x_column)?, find(y_column)?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("non-numeric value {:?}", &record[i])))
        };
        out.push((parse(xi)?, parse(yi)?));
    }
    Ok(out)
}
