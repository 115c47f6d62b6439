//! Encryption-time sweep over template dimensionality.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;

use super::keys::PublicKey;
use super::vector::encrypt_template;
use super::PheError;
use crate::message::Template;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dims: usize,
    pub bits: u64,
    pub reps: usize,
    /// Fastest of `reps` runs.
    pub encrypt_secs: f64,
}

impl SweepRow {
    pub fn per_element_micros(&self) -> f64 {
        self.encrypt_secs * 1e6 / self.dims as f64
    }
}

/// Powers of two from `lo` to `hi` inclusive (both rounded to powers of two).
pub fn power_of_two_dims(lo: usize, hi: usize) -> Vec<usize> {
    let mut d = lo.max(1).next_power_of_two();
    let mut out = Vec::new();
    while d <= hi {
        out.push(d);
        d *= 2;
    }
    out
}

/// Times `encrypt_template` for each dimensionality. Each row keeps the
/// minimum over `reps` runs of a random unit-range template.
pub fn encryption_sweep<R: Rng + ?Sized>(
    pk: &PublicKey,
    dims: &[usize],
    reps: usize,
    scale: u64,
    rng: &mut R,
) -> Result<Vec<SweepRow>, PheError> {
    let reps = reps.max(1);
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let template = Template {
            vector: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            modality: "sweep".into(),
            subject_id: None,
        };
        let mut best = Duration::MAX;
        for _ in 0..reps {
            let start = Instant::now();
            let enc = encrypt_template(pk, &template, scale, rng)?;
            best = best.min(start.elapsed());
            std::hint::black_box(enc);
        }
        rows.push(SweepRow { dims: d, bits: pk.bits, reps, encrypt_secs: best.as_secs_f64() });
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "dims,bits,reps,encrypt_ms,per_element_us";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.3}",
            r.dims,
            r.bits,
            r.reps,
            r.encrypt_secs * 1e3,
            r.per_element_micros()
        );
    }
    out
}

/// Ordinary least squares y = slope·x + intercept with its R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_are_powers_of_two() {
        assert_eq!(power_of_two_dims(1, 1024), vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]);
        assert_eq!(power_of_two_dims(3, 20), vec![4, 8, 16]);
    }

    #[test]
    fn exact_line_has_unit_r_squared() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let fit = linear_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 3.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_dim() {
        let rows = vec![
            SweepRow { dims: 1, bits: 64, reps: 1, encrypt_secs: 0.001 },
            SweepRow { dims: 2, bits: 64, reps: 1, encrypt_secs: 0.002 },
        ];
        let csv = sweep_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines[1], "1,64,1,1.000000,1000.000");
        assert_eq!(lines.len(), 3);
    }
}
