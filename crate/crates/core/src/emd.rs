//! Empirical mode decomposition by envelope sifting, and the
//! high/medium/low/trend component sums built from the extracted IMFs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmdError {
    #[error("signal of length {0} is too short to decompose (minimum 8)")]
    TooShort(usize),
    #[error("signal contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid emd configuration: {0}")]
    InvalidConfig(String),
}

pub const MIN_SIGNAL_LEN: usize = 8;

/// A residual whose range is below this fraction of the input range is
/// rounding noise around a constant and is not sifted further.
pub const NEGLIGIBLE_RANGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmdConfig {
    /// Sifting stops once the SD between successive iterates drops to this.
    pub sd_stop: f64,
    pub max_sift_iters: usize,
    pub max_imfs: usize,
    /// Extrema mirrored across each end before spline fitting.
    pub boundary_pad_extrema: usize,
    /// Fold the final residual into the trend component.
    pub trend_includes_residual: bool,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            sd_stop: 0.3,
            max_sift_iters: 50,
            max_imfs: 12,
            boundary_pad_extrema: 2,
            trend_includes_residual: true,
        }
    }
}

impl EmdConfig {
    pub fn validate(&self) -> Result<(), EmdError> {
        if !(self.sd_stop > 0.0) {
            return Err(EmdError::InvalidConfig(format!(
                "sd_stop must be positive, got {}",
                self.sd_stop
            )));
        }
        if self.max_sift_iters == 0 || self.max_imfs == 0 || self.boundary_pad_extrema == 0 {
            return Err(EmdError::InvalidConfig(
                "max_sift_iters, max_imfs and boundary_pad_extrema must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Strict interior local maxima and minima (plateaus are neither).
pub fn find_extrema(signal: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    for k in 1..signal.len().saturating_sub(1) {
        let (a, b, c) = (signal[k - 1], signal[k], signal[k + 1]);
        if a < b && b > c {
            maxima.push(k);
        } else if a > b && b < c {
            minima.push(k);
        }
    }
    (maxima, minima)
}

pub fn count_extrema(signal: &[f64]) -> usize {
    let (mx, mn) = find_extrema(signal);
    mx.len() + mn.len()
}

/// Sign changes, skipping exact zeros.
pub fn count_zero_crossings(signal: &[f64]) -> usize {
    let mut last = 0.0f64;
    let mut crossings = 0;
    for &v in signal {
        if v == 0.0 {
            continue;
        }
        if last != 0.0 && (v > 0.0) != (last > 0.0) {
            crossings += 1;
        }
        last = v;
    }
    crossings
}

/// `(extrema, zero crossings)` counted on the samples left after dropping a
/// 5% margin at each end.
pub fn interior_counts(signal: &[f64]) -> (usize, usize) {
    let margin = signal.len() / 20;
    let inner = &signal[margin..signal.len() - margin];
    (count_extrema(inner), count_zero_crossings(inner))
}

pub fn is_well_formed_imf(signal: &[f64]) -> bool {
    let (e, z) = interior_counts(signal);
    e.abs_diff(z) <= 1
}

/// Natural cubic spline through `(xs, ys)` sampled at `0, 1, .., n-1`.
/// `xs` must be strictly increasing with at least two knots.
fn natural_spline_on_grid(xs: &[f64], ys: &[f64], n: usize) -> Vec<f64> {
    let m = xs.len();
    debug_assert!(m >= 2 && ys.len() == m);
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();

    // Second derivatives; natural ends fix the first and last at zero.
    let mut second = vec![0.0; m];
    if m > 2 {
        let k = m - 2;
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            upper[i] = h[i + 1];
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        // Thomas algorithm; the system is strictly diagonally dominant.
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        second[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            second[i + 1] = (rhs[i] - upper[i] * second[i + 2]) / diag[i];
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for t in 0..n {
        let x = t as f64;
        while seg + 2 < m && x > xs[seg + 1] {
            seg += 1;
        }
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let hs = x1 - x0;
        let a = (x1 - x) / hs;
        let b = (x - x0) / hs;
        let v = a * ys[seg]
            + b * ys[seg + 1]
            + ((a * a * a - a) * second[seg] + (b * b * b - b) * second[seg + 1]) * hs * hs / 6.0;
        out.push(v);
    }
    out
}

/// Knots for one envelope: the extrema plus `pad` of them reflected about
/// each end sample.
fn padded_knots(signal: &[f64], idx: &[usize], pad: usize) -> (Vec<f64>, Vec<f64>) {
    let last = (signal.len() - 1) as f64;
    let pad = pad.min(idx.len());
    let mut xs = Vec::with_capacity(idx.len() + 2 * pad);
    let mut ys = Vec::with_capacity(idx.len() + 2 * pad);
    for &k in idx[..pad].iter().rev() {
        xs.push(-(k as f64));
        ys.push(signal[k]);
    }
    for &k in idx {
        xs.push(k as f64);
        ys.push(signal[k]);
    }
    for &k in idx[idx.len() - pad..].iter().rev() {
        xs.push(2.0 * last - k as f64);
        ys.push(signal[k]);
    }
    (xs, ys)
}

/// Mean of the upper and lower cubic-spline envelopes, or `None` when the
/// signal lacks a maximum or a minimum. The mirrored knots give every
/// envelope at least three points, so one extremum of each kind suffices.
pub fn mean_envelope(signal: &[f64], pad: usize) -> Option<Vec<f64>> {
    let (maxima, minima) = find_extrema(signal);
    if maxima.is_empty() || minima.is_empty() {
        return None;
    }
    let n = signal.len();
    let (ux, uy) = padded_knots(signal, &maxima, pad);
    let (lx, ly) = padded_knots(signal, &minima, pad);
    let upper = natural_spline_on_grid(&ux, &uy, n);
    let lower = natural_spline_on_grid(&lx, &ly, n);
    Some(
        upper
            .iter()
            .zip(&lower)
            .map(|(u, l)| 0.5 * (u + l))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imf {
    /// 1-based; 1 is the highest frequency.
    pub index: usize,
    pub values: Vec<f64>,
    pub sift_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SiftOutcome {
    Extracted {
        imf: Vec<f64>,
        proto_residual: Vec<f64>,
        iterations: usize,
    },
    /// The input has too few extrema to carry an oscillatory mode.
    SignalIsResidual,
}

/// `sum_t (prev_t - next_t)^2 / prev_t^2`, skipping `prev_t == 0`.
pub fn sifting_sd(prev: &[f64], next: &[f64]) -> f64 {
    prev.iter()
        .zip(next)
        .filter(|(p, _)| **p != 0.0)
        .map(|(p, q)| (p - q) * (p - q) / (p * p))
        .sum()
}

/// Repeatedly subtracts the mean envelope until the SD drops to
/// `cfg.sd_stop` or `cfg.max_sift_iters` is reached.
pub fn sift_one_imf(signal: &[f64], cfg: &EmdConfig) -> SiftOutcome {
    let Some(mut envelope) = mean_envelope(signal, cfg.boundary_pad_extrema) else {
        return SiftOutcome::SignalIsResidual;
    };
    let mut h = signal.to_vec();
    let mut iterations = 0;
    loop {
        let next: Vec<f64> = h.iter().zip(&envelope).map(|(a, m)| a - m).collect();
        iterations += 1;
        let sd = sifting_sd(&h, &next);
        h = next;
        if sd <= cfg.sd_stop || iterations >= cfg.max_sift_iters {
            break;
        }
        match mean_envelope(&h, cfg.boundary_pad_extrema) {
            Some(m) => envelope = m,
            None => break,
        }
    }
    let proto_residual = signal.iter().zip(&h).map(|(x, c)| x - c).collect();
    SiftOutcome::Extracted {
        imf: h,
        proto_residual,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub source_id: String,
    pub input: Vec<f64>,
    pub imfs: Vec<Imf>,
    pub residual: Vec<f64>,
}

impl Decomposition {
    pub fn imf_count(&self) -> usize {
        self.imfs.len()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.input.len()];
        for imf in &self.imfs {
            for (o, v) in out.iter_mut().zip(&imf.values) {
                *o += v;
            }
        }
        for (o, r) in out.iter_mut().zip(&self.residual) {
            *o += r;
        }
        out
    }

    /// Columns `t,input,imf_1..imf_J,residual`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "input".to_string()];
        header.extend((1..=self.imfs.len()).map(|j| format!("imf_{j}")));
        header.push("residual".into());
        wtr.write_record(&header)?;
        for t in 0..self.input.len() {
            let mut rec = vec![t.to_string(), self.input[t].to_string()];
            rec.extend(self.imfs.iter().map(|imf| imf.values[t].to_string()));
            rec.push(self.residual[t].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn value_range(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Extracts IMFs from the running residual until it can no longer be
/// sifted or `cfg.max_imfs` is reached.
pub fn decompose(
    signal: &[f64],
    source_id: impl Into<String>,
    cfg: &EmdConfig,
) -> Result<Decomposition, EmdError> {
    cfg.validate()?;
    if signal.len() < MIN_SIGNAL_LEN {
        return Err(EmdError::TooShort(signal.len()));
    }
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(EmdError::NonFinite(i));
    }
    let floor = NEGLIGIBLE_RANGE * value_range(signal);
    let mut imfs = Vec::new();
    let mut residual = signal.to_vec();
    while imfs.len() < cfg.max_imfs
        && value_range(&residual) > floor
        && count_extrema(&residual) >= 2
    {
        match sift_one_imf(&residual, cfg) {
            SiftOutcome::Extracted {
                imf,
                proto_residual,
                iterations,
            } => {
                imfs.push(Imf {
                    index: imfs.len() + 1,
                    values: imf,
                    sift_iterations: iterations,
                });
                residual = proto_residual;
            }
            SiftOutcome::SignalIsResidual => break,
        }
    }
    Ok(Decomposition {
        source_id: source_id.into(),
        input: signal.to_vec(),
        imfs,
        residual,
    })
}

/// Which cumulative component sum to use as a feature source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    High,
    Medium,
    Low,
    Trend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub high: Vec<f64>,
    pub medium: Vec<f64>,
    pub low: Vec<f64>,
    pub trend: Vec<f64>,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub imf_count: usize,
}

impl ComponentSet {
    pub fn get(&self, c: Component) -> &[f64] {
        match c {
            Component::High => &self.high,
            Component::Medium => &self.medium,
            Component::Low => &self.low,
            Component::Trend => &self.trend,
        }
    }
}

/// `(r1, r2, r3) = (max(1, J-6), max(1, J-4), max(1, J-2))`; all zero for `J = 0`.
pub fn cutoffs(j: usize) -> (usize, usize, usize) {
    if j == 0 {
        return (0, 0, 0);
    }
    let c = |k: usize| j.saturating_sub(k).max(1);
    (c(6), c(4), c(2))
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Cumulative IMF sums up to each cutoff. High, medium and low nest: each
/// continues the running sum of the previous one. The trend takes the
/// remaining IMFs, plus the residual when `trend_includes_residual` is set.
pub fn assemble_components(d: &Decomposition, trend_includes_residual: bool) -> ComponentSet {
    let n = d.input.len();
    let j = d.imfs.len();
    let (r1, r2, r3) = cutoffs(j);

    let mut running = vec![0.0; n];
    for imf in &d.imfs[..r1] {
        add_into(&mut running, &imf.values);
    }
    let high = running.clone();
    for imf in &d.imfs[r1..r2] {
        add_into(&mut running, &imf.values);
    }
    let medium = running.clone();
    for imf in &d.imfs[r2..r3] {
        add_into(&mut running, &imf.values);
    }
    let low = running;

    let mut trend = vec![0.0; n];
    for imf in &d.imfs[r3..] {
        add_into(&mut trend, &imf.values);
    }
    if trend_includes_residual {
        add_into(&mut trend, &d.residual);
    }
    ComponentSet {
        high,
        medium,
        low,
        trend,
        r1,
        r2,
        r3,
        imf_count: j,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn range(x: &[f64]) -> f64 {
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    fn fake_decomposition(j: usize, n: usize) -> Decomposition {
        let imfs: Vec<Imf> = (0..j)
            .map(|k| Imf {
                index: k + 1,
                values: (0..n)
                    .map(|t| ((t * (k + 3)) as f64 * 0.37).sin() / (k + 1) as f64)
                    .collect(),
                sift_iterations: 1,
            })
            .collect();
        let residual: Vec<f64> = (0..n).map(|t| 0.01 * t as f64).collect();
        let mut input = residual.clone();
        for imf in &imfs {
            add_into(&mut input, &imf.values);
        }
        Decomposition {
            source_id: "x".into(),
            input,
            imfs,
            residual,
        }
    }

    #[test]
    fn extrema_are_strict() {
        let (mx, mn) = find_extrema(&[0.0, 1.0, 1.0, 0.0, -1.0, 0.0, 2.0, 1.0]);
        assert_eq!(mx, vec![6]);
        assert_eq!(mn, vec![4]);
    }

    #[test]
    fn zero_crossings_skip_exact_zeros() {
        assert_eq!(count_zero_crossings(&[1.0, 0.0, -1.0, 0.0, 0.0, 2.0]), 2);
        assert_eq!(count_zero_crossings(&[1.0, 2.0]), 0);
    }

    #[test]
    fn spline_reproduces_linear_data() {
        let xs = [-3.0, 0.5, 2.0, 7.0, 9.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let v = natural_spline_on_grid(&xs, &ys, 9);
        for (t, y) in v.iter().enumerate() {
            assert!((y - (2.0 * t as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_interpolates_knots() {
        let xs = [-2.0, 1.0, 3.0, 4.0, 8.0, 12.0];
        let ys = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let v = natural_spline_on_grid(&xs, &ys, 12);
        assert!((v[1] + 1.0).abs() < 1e-12);
        assert!((v[3] - 2.0).abs() < 1e-12);
        assert!((v[4] - 0.5).abs() < 1e-12);
        assert!(v[8].abs() < 1e-12);
    }

    #[test]
    fn ramp_has_insufficient_extrema() {
        let ramp: Vec<f64> = (0..64).map(|t| t as f64).collect();
        assert!(mean_envelope(&ramp, 2).is_none());
    }

    #[test]
    fn sine_mean_envelope_is_small() {
        let s: Vec<f64> = (0..256)
            .map(|k| (2.0 * PI * 4.0 * k as f64 / 256.0).sin())
            .collect();
        let m = mean_envelope(&s, 2).unwrap();
        let lo = (256.0 * 0.1) as usize;
        let hi = 256 - lo;
        let worst = m[lo..hi].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "max |m| = {worst}");
    }

    #[test]
    fn envelope_shifts_with_constant() {
        let s: Vec<f64> = (0..128).map(|k| (k as f64 * 0.4).sin() + 0.1 * (k as f64 * 0.05).cos()).collect();
        let c = 3.25;
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let a = mean_envelope(&s, 2).unwrap();
        let b = mean_envelope(&shifted, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - c).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_signal_is_residual() {
        assert_eq!(
            sift_one_imf(&[2.0; 32], &EmdConfig::default()),
            SiftOutcome::SignalIsResidual
        );
    }

    #[test]
    fn pure_sine_sifts_to_itself() {
        let s: Vec<f64> = (0..256)
            .map(|k| (2.0 * PI * 4.0 * k as f64 / 256.0).sin())
            .collect();
        let SiftOutcome::Extracted { imf, .. } = sift_one_imf(&s, &EmdConfig::default()) else {
            panic!("sine should sift");
        };
        assert!(pearson(&imf, &s) > 0.99);
    }

    #[test]
    fn sifting_is_deterministic() {
        let s: Vec<f64> = (0..200).map(|k| (k as f64 * 0.3).sin() + (k as f64 * 0.031).cos()).collect();
        let cfg = EmdConfig::default();
        let a = decompose(&s, "a", &cfg).unwrap();
        let b = decompose(&s, "a", &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ramp_decomposes_to_residual_only() {
        let ramp: Vec<f64> = (0..64).map(|t| 0.5 * t as f64 - 3.0).collect();
        let d = decompose(&ramp, "ramp", &EmdConfig::default()).unwrap();
        assert_eq!(d.imf_count(), 0);
        assert_eq!(d.residual, ramp);
    }

    #[test]
    fn short_and_non_finite_inputs() {
        let cfg = EmdConfig::default();
        assert_eq!(decompose(&[1.0; 7], "x", &cfg), Err(EmdError::TooShort(7)));
        let mut s = vec![1.0; 16];
        s[5] = f64::NAN;
        assert_eq!(decompose(&s, "x", &cfg), Err(EmdError::NonFinite(5)));
    }

    #[test]
    fn max_imfs_caps_decomposition() {
        let s: Vec<f64> = (0..512)
            .map(|k| (k as f64 * 0.9).sin() + (k as f64 * 0.2).sin() + (k as f64 * 0.03).sin())
            .collect();
        let cfg = EmdConfig {
            max_imfs: 1,
            ..Default::default()
        };
        let d = decompose(&s, "x", &cfg).unwrap();
        assert_eq!(d.imf_count(), 1);
    }

    #[test]
    fn reconstruction_is_tight() {
        let s: Vec<f64> = (0..300)
            .map(|k| (k as f64 * 0.7).sin() * 2.0 + (k as f64 * 0.05).cos() + 0.01 * k as f64)
            .collect();
        let d = decompose(&s, "x", &EmdConfig::default()).unwrap();
        assert!(d.imf_count() >= 2);
        let r = d.reconstruct();
        let err = r.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-8 * range(&s));
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoffs(8), (2, 4, 6));
        assert_eq!(cutoffs(3), (1, 1, 1));
        assert_eq!(cutoffs(1), (1, 1, 1));
        assert_eq!(cutoffs(0), (0, 0, 0));
        for j in 1..=12 {
            let (a, b, c) = cutoffs(j);
            assert!(a <= b && b <= c && c <= j);
        }
    }

    #[test]
    fn components_for_eight_imfs() {
        let d = fake_decomposition(8, 50);
        let c = assemble_components(&d, true);
        let sum = |idx: &[usize]| -> Vec<f64> {
            let mut acc = vec![0.0; 50];
            for &i in idx {
                add_into(&mut acc, &d.imfs[i].values);
            }
            acc
        };
        assert_eq!(c.high, sum(&[0, 1]));
        assert_eq!(c.medium, sum(&[0, 1, 2, 3]));
        assert_eq!(c.low, sum(&[0, 1, 2, 3, 4, 5]));
        let mut trend = sum(&[6, 7]);
        add_into(&mut trend, &d.residual);
        assert_eq!(c.trend, trend);
    }

    #[test]
    fn components_for_three_imfs() {
        let d = fake_decomposition(3, 40);
        let c = assemble_components(&d, true);
        assert_eq!((c.r1, c.r2, c.r3), (1, 1, 1));
        assert_eq!(c.high, d.imfs[0].values);
        assert_eq!(c.medium, c.high);
        assert_eq!(c.low, c.high);
    }

    #[test]
    fn zero_imfs_put_everything_in_trend() {
        let ramp: Vec<f64> = (0..20).map(|t| t as f64).collect();
        let d = decompose(&ramp, "r", &EmdConfig::default()).unwrap();
        let c = assemble_components(&d, true);
        assert_eq!(c.trend, ramp);
        assert!(c.high.iter().chain(&c.medium).chain(&c.low).all(|v| *v == 0.0));
    }

    #[test]
    fn trend_without_residual() {
        let d = fake_decomposition(8, 30);
        let with = assemble_components(&d, true);
        let without = assemble_components(&d, false);
        for t in 0..30 {
            assert!((with.trend[t] - without.trend[t] - d.residual[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_export_columns() {
        let d = fake_decomposition(2, 10);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,input,imf_1,imf_2,residual");
        assert_eq!(text.lines().count(), 11);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }
}
