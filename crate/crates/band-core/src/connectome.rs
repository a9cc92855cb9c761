//! Parcellated-series baseline: global-signal regression, zero-phase
//! Butterworth bandpass, Pearson connectivity features, and two classical
//! classifiers (multinomial logistic regression and a 3-layer MLP).

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{bind, ForwardCtx, Fwd, Linear, ParamStore};
use crate::rng::stream;
use crate::tensor::Tape;
use crate::train::{AdamConfig, AdamState};

// ── parcel series ────────────────────────────────────────────────────

/// T×R matrix of region time series, row-major by timepoint.
#[derive(Debug, Clone)]
pub struct ParcelSeries {
    pub values: Vec<f64>,
    pub t: usize,
    pub r: usize,
    pub sample_period_s: f64,
}

impl ParcelSeries {
    pub fn new(t: usize, r: usize, values: Vec<f64>, sample_period_s: f64) -> Result<ParcelSeries> {
        if t < 2 || r < 2 {
            return Err(Error::Dimension(format!("series is {t}×{r}; need T ≥ 2 and R ≥ 2")));
        }
        if values.len() != t * r {
            return Err(Error::ShapeMismatch(format!("{} values for {t}×{r}", values.len())));
        }
        if !(sample_period_s > 0.0) {
            return Err(Error::Parameter(format!("sample period {sample_period_s} s")));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series value {bad}")));
        }
        Ok(ParcelSeries { values, t, r, sample_period_s })
    }

    pub fn at(&self, t: usize, r: usize) -> f64 {
        self.values[t * self.r + r]
    }

    pub fn column(&self, r: usize) -> Vec<f64> {
        (0..self.t).map(|t| self.at(t, r)).collect()
    }

    fn set_column(&mut self, r: usize, col: &[f64]) {
        for (t, &v) in col.iter().enumerate() {
            self.values[t * self.r + r] = v;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for r in 0..self.r {
            s.push_str(&format!(",r{r}"));
        }
        s.push('\n');
        for t in 0..self.t {
            s.push_str(&t.to_string());
            for r in 0..self.r {
                s.push_str(&format!(",{}", self.at(t, r)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, sample_period_s: f64) -> Result<ParcelSeries> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format {
            offset: 0,
            message: "empty series file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 3 {
            return Err(Error::Format {
                offset: 0,
                message: format!("header {header:?}, expected t,r0,..."),
            });
        }
        let r = cols.len() - 1;
        let mut values = Vec::new();
        let mut t = 0usize;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != r + 1 {
                return Err(Error::Format {
                    offset: (i + 1) as u64,
                    message: format!("row {i} has {} fields, expected {}", fields.len(), r + 1),
                });
            }
            for f in &fields[1..] {
                values.push(f.trim().parse::<f64>().map_err(|e| Error::Format {
                    offset: (i + 1) as u64,
                    message: format!("bad number {f:?}: {e}"),
                })?);
            }
            t += 1;
        }
        ParcelSeries::new(t, r, values, sample_period_s)
    }
}

// ── global signal regression ─────────────────────────────────────────

/// Remove each region's best affine fit to the across-region mean series:
/// residual_r = x_r − (a_r + b_r·g).
pub fn global_signal_regress(x: &ParcelSeries) -> Result<ParcelSeries> {
    if x.t < 3 {
        return Err(Error::Contract(format!("GSR needs T ≥ 3, got {}", x.t)));
    }
    let g: Vec<f64> = (0..x.t)
        .map(|t| (0..x.r).map(|r| x.at(t, r)).sum::<f64>() / x.r as f64)
        .collect();
    let gm = g.iter().sum::<f64>() / x.t as f64;
    let gvar: f64 = g.iter().map(|v| (v - gm) * (v - gm)).sum();
    if gvar <= f64::EPSILON * x.t as f64 {
        return Err(Error::DegenerateRegressor(
            "global mean series has zero variance".into(),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.r {
        let col = x.column(r);
        let cm = col.iter().sum::<f64>() / x.t as f64;
        let cov: f64 = col.iter().zip(&g).map(|(c, gv)| (c - cm) * (gv - gm)).sum();
        let b = cov / gvar;
        let a = cm - b * gm;
        let resid: Vec<f64> = col.iter().zip(&g).map(|(c, gv)| c - a - b * gv).collect();
        out.set_column(r, &resid);
    }
    Ok(out)
}

// ── Butterworth bandpass ─────────────────────────────────────────────

/// One second-order section, direct form II transposed.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Denominator a1, a2 (a0 normalized to 1).
    pub a: [f64; 2],
}

impl Biquad {
    /// Steady-state filter state for a unit-level input, so a constant
    /// signal produces its constant response from the first sample.
    pub fn unit_state(&self) -> [f64; 2] {
        let b0 = self.b[0];
        let rhs = [self.b[1] - self.a[0] * b0, self.b[2] - self.a[1] * b0];
        let det = 1.0 + self.a[0] + self.a[1];
        // (I − Aᵀ) zi = rhs for the companion-form state matrix.
        let zi0 = (rhs[0] + rhs[1]) / det;
        let zi1 = ((1.0 + self.a[0]) * rhs[1] - self.a[1] * rhs[0]) / det;
        [zi0, zi1]
    }

    pub fn filter(&self, x: &[f64], zi: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let (mut z0, mut z1) = (zi[0], zi[1]);
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z0;
                z0 = b1 * xi - a1 * y + z1;
                z1 = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// |H(e^{j2πf/fs})| of the cascade.
pub fn cascade_gain(sos: &[Biquad], f_hz: f64, fs: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * f_hz / fs;
    sos.iter().map(|s| s.response(omega).norm()).product()
}

/// Digital Butterworth bandpass as cascaded second-order sections:
/// analog prototype → lowpass-to-bandpass → bilinear transform with
/// frequency pre-warping. Cascade gain is exactly 1 at the geometric
/// band center.
pub fn butterworth_bandpass_sos(
    low_hz: f64,
    high_hz: f64,
    order: usize,
    fs: f64,
) -> Result<Vec<Biquad>> {
    let nyq = fs / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq) {
        return Err(Error::Parameter(format!(
            "band [{low_hz}, {high_hz}] Hz must satisfy 0 < low < high < Nyquist {nyq}"
        )));
    }
    if order == 0 || order > 12 {
        return Err(Error::Parameter(format!("filter order {order} outside 1..=12")));
    }
    let c = 2.0 * fs;
    let warp = |f: f64| c * (std::f64::consts::PI * f / fs).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // Analog lowpass prototype poles on the unit circle's left half.
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Lowpass → bandpass doubles the order: p → p·bw/2 ± √((p·bw/2)² − w0²).
    let mut analog_poles = Vec::with_capacity(2 * order);
    for p in proto {
        let s = p * (bw / 2.0);
        let d = (s * s - w0sq).sqrt();
        analog_poles.push(s + d);
        analog_poles.push(s - d);
    }

    // Bilinear transform; each conjugate pair becomes one section with
    // numerator (z−1)(z+1).
    let mut digital: Vec<Complex64> = analog_poles.iter().map(|&s| (c + s) / (c - s)).collect();
    // Deterministic pairing: sort by (imag magnitude, real), keep the
    // upper-half-plane representative of each conjugate pair.
    digital.retain(|p| p.im >= 0.0);
    digital.sort_by(|x, y| (x.re, x.im).partial_cmp(&(y.re, y.im)).unwrap());
    if digital.len() != order {
        return Err(Error::Parameter(format!(
            "pole pairing failed: {} upper-half poles for order {order}",
            digital.len()
        )));
    }
    let mut sos: Vec<Biquad> = digital
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-2.0 * p.re, p.norm_sqr()],
        })
        .collect();

    // Normalize: the analog response is exactly 1 at w0 = √(w1 w2); the
    // bilinear transform maps it to this digital frequency.
    let f0 = fs / std::f64::consts::PI * (w0sq.sqrt() / c).atan();
    let gain = cascade_gain(&sos, f0, fs);
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::Parameter(format!("degenerate cascade gain {gain}")));
    }
    let per_section = (1.0 / gain).powf(1.0 / sos.len() as f64);
    for s in &mut sos {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(sos)
}

/// Forward-backward (zero-phase) application with odd-reflection padding
/// of 3× the cascade's filter order at both ends.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Result<Vec<f64>> {
    let padlen = 3 * 2 * sos.len();
    if x.len() <= padlen {
        return Err(Error::Parameter(format!(
            "series length {} too short for zero-phase padding {padlen}",
            x.len()
        )));
    }
    let n = x.len();
    let mut padded = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        padded.push(2.0 * x[0] - x[i]);
    }
    padded.extend_from_slice(x);
    for i in 1..=padlen {
        padded.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let pass = |mut data: Vec<f64>| -> Vec<f64> {
        for s in sos {
            let zi = s.unit_state();
            let z = [zi[0] * data[0], zi[1] * data[0]];
            data = s.filter(&data, z);
        }
        data
    };
    let mut y = pass(padded);
    y.reverse();
    y = pass(y);
    y.reverse();
    Ok(y[padlen..padlen + n].to_vec())
}

/// Zero-phase bandpass of every region.
pub fn butterworth_bandpass(
    x: &ParcelSeries,
    low_hz: f64,
    high_hz: f64,
    order: usize,
) -> Result<ParcelSeries> {
    let fs = 1.0 / x.sample_period_s;
    let sos = butterworth_bandpass_sos(low_hz, high_hz, order, fs)?;
    let cols: Vec<Vec<f64>> = (0..x.r)
        .into_par_iter()
        .map(|r| sosfiltfilt(&sos, &x.column(r)))
        .collect::<Result<_>>()?;
    let mut out = x.clone();
    for (r, col) in cols.iter().enumerate() {
        out.set_column(r, col);
    }
    Ok(out)
}

// ── Pearson connectome ───────────────────────────────────────────────

/// R×R Pearson correlation matrix, row-major.
#[derive(Debug, Clone)]
pub struct ConnectomeMatrix {
    pub values: Vec<f64>,
    pub r: usize,
}

impl ConnectomeMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.r + j]
    }
}

pub fn pearson_connectome(x: &ParcelSeries) -> Result<ConnectomeMatrix> {
    let (t, r) = (x.t, x.r);
    let mut centered = vec![0.0; t * r];
    let mut sd = vec![0.0; r];
    for j in 0..r {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / t as f64;
        let mut ss = 0.0;
        for (i, &v) in col.iter().enumerate() {
            let c = v - mean;
            centered[i * r + j] = c;
            ss += c * c;
        }
        if ss <= 0.0 {
            return Err(Error::DegenerateSeries { region: j });
        }
        sd[j] = ss.sqrt();
    }
    let mut values = vec![0.0; r * r];
    for i in 0..r {
        values[i * r + i] = 1.0;
        for j in i + 1..r {
            let mut dot = 0.0;
            for ti in 0..t {
                dot += centered[ti * r + i] * centered[ti * r + j];
            }
            let c = (dot / (sd[i] * sd[j])).clamp(-1.0, 1.0);
            values[i * r + j] = c;
            values[j * r + i] = c;
        }
    }
    Ok(ConnectomeMatrix { values, r })
}

/// Strict upper triangle, row-major: R(R−1)/2 features.
pub fn connectome_features(m: &ConnectomeMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.r * (m.r - 1) / 2);
    for i in 0..m.r {
        for j in i + 1..m.r {
            out.push(m.at(i, j));
        }
    }
    out
}

// ── multinomial logistic regression ──────────────────────────────────

#[derive(Debug, Clone)]
pub struct LogisticModel {
    /// F×C row-major weights.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub features: usize,
    pub classes: usize,
}

impl LogisticModel {
    fn zeros(features: usize, classes: usize) -> LogisticModel {
        LogisticModel { w: vec![0.0; features * classes], b: vec![0.0; classes], features, classes }
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.b.clone();
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &self.w[f * self.classes..(f + 1) * self.classes];
            for (c, &wfc) in row.iter().enumerate() {
                s[c] += xf * wfc;
            }
        }
        s
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::models::argmax(&self.scores(x))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }

    pub fn nonzero_weights(&self) -> usize {
        self.w.iter().filter(|v| **v != 0.0).count()
    }
}

fn check_labels(xs: &[Vec<f64>], ys: &[usize]) -> Result<usize> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples vs {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let classes = ys.iter().max().unwrap() + 1;
    let mut seen = vec![false; classes];
    for &y in ys {
        seen[y] = true;
    }
    if classes < 2 || seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::DegenerateLabels("fewer than two classes present".into()));
    }
    Ok(classes)
}

/// Mean softmax cross-entropy and its gradient over (w, b).
fn ce_loss_grad(
    model: &LogisticModel,
    xs: &[Vec<f64>],
    ys: &[usize],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let c = model.classes;
    let mut loss = 0.0;
    let mut gw = vec![0.0; model.w.len()];
    let mut gb = vec![0.0; c];
    for (x, &y) in xs.iter().zip(ys) {
        let mut s = model.scores(x);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in &mut s {
            *v = (*v - max).exp();
            z += *v;
        }
        loss += -(s[y] / z).ln();
        for (cls, &p) in s.iter().enumerate() {
            let d = p / z - if cls == y { 1.0 } else { 0.0 };
            gb[cls] += d / n;
            for (f, &xf) in x.iter().enumerate() {
                gw[f * c + cls] += xf * d / n;
            }
        }
    }
    (loss / n, gw, gb)
}

/// Plain multinomial fit by gradient descent with step halving.
pub fn logistic_fit_plain(xs: &[Vec<f64>], ys: &[usize], max_iter: usize) -> Result<LogisticModel> {
    let classes = check_labels(xs, ys)?;
    let features = xs[0].len();
    let mut model = LogisticModel::zeros(features, classes);
    let mut lr = 1.0;
    let (mut loss, mut gw, mut gb) = ce_loss_grad(&model, xs, ys);
    for _ in 0..max_iter {
        let gnorm: f64 = gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-9 {
            break;
        }
        let mut trial = model.clone();
        loop {
            for (w, g) in trial.w.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in trial.b.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
            let (next, ngw, ngb) = ce_loss_grad(&trial, xs, ys);
            if next <= loss || lr < 1e-12 {
                model = trial;
                loss = next;
                gw = ngw;
                gb = ngb;
                lr *= 1.1;
                break;
            }
            lr *= 0.5;
            trial = model.clone();
        }
    }
    Ok(model)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// L1-penalized multinomial fit, objective mean-CE + λ‖w‖₁ with λ = 1/(C·n),
/// solved by proximal gradient with backtracking; bias unpenalized.
pub fn logistic_fit_l1(xs: &[Vec<f64>], ys: &[usize], c_inverse_reg: f64) -> Result<LogisticModel> {
    let classes = check_labels(xs, ys)?;
    if !(c_inverse_reg > 0.0) {
        return Err(Error::Parameter(format!("C must be positive, got {c_inverse_reg}")));
    }
    let features = xs[0].len();
    let lambda = 1.0 / (c_inverse_reg * xs.len() as f64);
    let mut model = LogisticModel::zeros(features, classes);
    let mut step = 1.0;
    let (mut loss, mut gw, mut gb) = ce_loss_grad(&model, xs, ys);
    for _ in 0..3000 {
        let mut trial;
        loop {
            trial = model.clone();
            for (w, g) in trial.w.iter_mut().zip(&gw) {
                *w = soft_threshold(*w - step * g, step * lambda);
            }
            for (b, g) in trial.b.iter_mut().zip(&gb) {
                *b -= step * g;
            }
            let (next, ngw, ngb) = ce_loss_grad(&trial, xs, ys);
            // Backtracking on the smooth part's quadratic upper bound.
            let mut dq = 0.0;
            let mut dd = 0.0;
            for ((wn, wo), g) in trial.w.iter().zip(&model.w).zip(&gw) {
                let d = wn - wo;
                dq += g * d;
                dd += d * d;
            }
            for ((bn, bo), g) in trial.b.iter().zip(&model.b).zip(&gb) {
                let d = bn - bo;
                dq += g * d;
                dd += d * d;
            }
            if next <= loss + dq + dd / (2.0 * step) + 1e-15 || step < 1e-12 {
                let delta = dd.sqrt();
                model = trial;
                loss = next;
                gw = ngw;
                gb = ngb;
                step *= 1.2;
                if delta < 1e-7 {
                    return Ok(model);
                }
                break;
            }
            step *= 0.5;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct L1Options {
    pub folds: usize,
    /// Grid of inverse regularization strengths.
    pub c_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for L1Options {
    fn default() -> Self {
        L1Options {
            folds: 3,
            c_grid: (-3..=3).map(|c| 10f64.powi(c)).collect(),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub selected_c: Option<f64>,
    /// (C, mean CV accuracy) per grid point.
    pub cv_table: Vec<(f64, f64)>,
}

/// Deterministic stratified fold assignment: within each class, samples
/// are shuffled by seed and dealt round-robin.
pub fn cv_folds(ys: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let classes = ys.iter().max().map_or(0, |m| m + 1);
    let mut assignment = vec![0usize; ys.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        let mut rng = stream(seed, "cv-folds", &[c as u64]);
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

/// Multinomial logistic regression; `l1` enables the penalized variant
/// with C chosen by stratified k-fold cross-validation (ties broken
/// toward stronger regularization, i.e. smaller C).
pub fn logistic_fit(xs: &[Vec<f64>], ys: &[usize], l1: Option<L1Options>) -> Result<LogisticFit> {
    let classes = check_labels(xs, ys)?;
    let Some(opt) = l1 else {
        return Ok(LogisticFit {
            model: logistic_fit_plain(xs, ys, 2000)?,
            selected_c: None,
            cv_table: Vec::new(),
        });
    };
    if opt.folds < 2 {
        return Err(Error::Parameter(format!("{} folds; need ≥ 2", opt.folds)));
    }
    let mut per_class = vec![0usize; classes];
    for &y in ys {
        per_class[y] += 1;
    }
    if let Some((c, &n)) = per_class.iter().enumerate().find(|(_, &n)| n > 0 && n < opt.folds) {
        return Err(Error::DegenerateLabels(format!(
            "class {c} has {n} samples; {}-fold CV needs ≥ {}",
            opt.folds, opt.folds
        )));
    }
    let assignment = cv_folds(ys, opt.folds, opt.seed);
    let cv_table: Vec<(f64, f64)> = opt
        .c_grid
        .par_iter()
        .map(|&c_val| {
            let mut acc = 0.0;
            for fold in 0..opt.folds {
                let (mut txs, mut tys, mut vxs, mut vys) = (vec![], vec![], vec![], vec![]);
                for i in 0..xs.len() {
                    if assignment[i] == fold {
                        vxs.push(xs[i].clone());
                        vys.push(ys[i]);
                    } else {
                        txs.push(xs[i].clone());
                        tys.push(ys[i]);
                    }
                }
                let m = logistic_fit_l1(&txs, &tys, c_val)?;
                acc += m.accuracy(&vxs, &vys);
            }
            Ok((c_val, acc / opt.folds as f64))
        })
        .collect::<Result<_>>()?;
    let mut best = cv_table[0];
    for &(c_val, acc) in &cv_table[1..] {
        if acc > best.1 {
            best = (c_val, acc);
        }
    }
    let model = logistic_fit_l1(xs, ys, best.0)?;
    Ok(LogisticFit { model, selected_c: Some(best.0), cv_table })
}

// ── 3-layer MLP classifier ───────────────────────────────────────────

#[derive(Debug)]
pub struct FcnnModel {
    pub store: ParamStore<f64>,
    pub layers: [Linear; 3],
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl FcnnModel {
    fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::<f64>::inference();
        let bound = bind(&self.store, &mut tape);
        let mut ctx = ForwardCtx::eval(0);
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let x = tape.leaf(&[xs.len(), self.features], flat, false)?;
        let logits = {
            let mut f = Fwd::new(&mut tape, &self.store, &bound, &mut ctx);
            let h1 = self.layers[0].forward(&mut f, x)?;
            let h1 = f.tape.relu(h1);
            let h2 = self.layers[1].forward(&mut f, h1)?;
            let h2 = f.tape.relu(h2);
            self.layers[2].forward(&mut f, h2)?
        };
        let data = tape.data(logits);
        Ok(data.chunks(self.classes).map(|c| c.to_vec()).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let rows = self.forward_batch(&[x.to_vec()])?;
        Ok(crate::models::argmax(&rows[0]))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        let rows = self.forward_batch(xs)?;
        let hits = rows
            .iter()
            .zip(ys)
            .filter(|(r, &y)| crate::models::argmax(r) == y)
            .count();
        Ok(hits as f64 / xs.len().max(1) as f64)
    }
}

/// input → hidden → hidden → classes with ReLU, softmax cross-entropy,
/// Adam full-batch training.
pub fn fcnn_fit(
    xs: &[Vec<f64>],
    ys: &[usize],
    hidden: usize,
    epochs: usize,
    seed: u64,
) -> Result<FcnnModel> {
    let classes = check_labels(xs, ys)?;
    let features = xs[0].len();
    let mut store = ParamStore::<f64>::new(seed);
    let layers = [
        Linear::new(&mut store, "fc1", features, hidden, true)?,
        Linear::new(&mut store, "fc2", hidden, hidden, true)?,
        Linear::new(&mut store, "fc3", hidden, classes, true)?,
    ];
    let mut adam = AdamState::new(&store, AdamConfig { weight_decay: 0.0, ..Default::default() });
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    for _ in 0..epochs {
        let mut tape = Tape::<f64>::new();
        let bound = bind(&store, &mut tape);
        let mut ctx = ForwardCtx::new(crate::tensor::Mode::Train, seed, [0, 0, 0]);
        let x = tape.leaf(&[xs.len(), features], flat.clone(), false)?;
        let logits = {
            let mut f = Fwd::new(&mut tape, &store, &bound, &mut ctx);
            let h1 = layers[0].forward(&mut f, x)?;
            let h1 = f.tape.relu(h1);
            let h2 = layers[1].forward(&mut f, h1)?;
            let h2 = f.tape.relu(h2);
            layers[2].forward(&mut f, h2)?
        };
        let loss = tape.cross_entropy(logits, ys)?;
        if !tape.data(loss)[0].is_finite() {
            return Err(Error::Divergence("non-finite MLP training loss".into()));
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = (0..store.len())
            .map(|i| tape.grad(bound.id(i)).map(|g| g.to_vec()))
            .collect();
        adam.apply(&mut store, &grads, 1e-3)?;
    }
    Ok(FcnnModel { store, layers, features, hidden, classes })
}

// ── synthetic connectome task ────────────────────────────────────────

/// Time-series classification task with class-dependent couplings: class
/// c ties region pair (2c, 2c+1) to a shared latent; all other structure
/// is i.i.d. noise.
pub fn synthetic_connectome_task(
    classes: usize,
    per_class: usize,
    regions: usize,
    t: usize,
    sample_period_s: f64,
    coupling: f64,
    seed: u64,
) -> Result<(Vec<ParcelSeries>, Vec<usize>)> {
    if 2 * classes > regions {
        return Err(Error::Parameter(format!(
            "{regions} regions cannot host {classes} disjoint coupled pairs"
        )));
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut xs = Vec::with_capacity(classes * per_class);
    let mut ys = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for i in 0..per_class {
            let mut rng = stream(seed, "connectome-task", &[c as u64, i as u64]);
            let mut values = vec![0.0; t * regions];
            for v in &mut values {
                *v = normal.sample(&mut rng);
            }
            for ti in 0..t {
                let z = normal.sample(&mut rng);
                values[ti * regions + 2 * c] += coupling * z;
                values[ti * regions + 2 * c + 1] += coupling * z;
            }
            xs.push(ParcelSeries::new(t, regions, values, sample_period_s)?);
            ys.push(c);
        }
    }
    Ok((xs, ys))
}

/// GSR → bandpass → Pearson → strict-upper-triangle features.
pub fn pipeline_features(
    x: &ParcelSeries,
    low_hz: f64,
    high_hz: f64,
    order: usize,
) -> Result<Vec<f64>> {
    let gsr = global_signal_regress(x)?;
    let filtered = butterworth_bandpass(&gsr, low_hz, high_hz, order)?;
    Ok(connectome_features(&pearson_connectome(&filtered)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const FS: f64 = 1.0 / 0.72;

    fn series(t: usize, r: usize, f: impl Fn(usize, usize) -> f64) -> ParcelSeries {
        let mut v = Vec::with_capacity(t * r);
        for ti in 0..t {
            for ri in 0..r {
                v.push(f(ti, ri));
            }
        }
        ParcelSeries::new(t, r, v, 0.72).unwrap()
    }

    #[test]
    fn gsr_kills_exact_affine_relations() {
        // Both regions affine in g ⇒ residuals vanish.
        let x = series(50, 2, |t, r| {
            let g = (t as f64 * 0.3).sin();
            if r == 0 { g } else { 5.0 + 2.0 * g }
        });
        let out = global_signal_regress(&x).unwrap();
        for v in &out.values {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn gsr_residuals_orthogonal_to_regressors() {
        let x = series(64, 5, |t, r| {
            let mut rng = stream(7, "gsr-test", &[t as u64, r as u64]);
            rng.gen::<f64>() * 2.0 - 1.0 + (t as f64 * 0.1).cos()
        });
        let g: Vec<f64> = (0..x.t)
            .map(|t| (0..x.r).map(|r| x.at(t, r)).sum::<f64>() / x.r as f64)
            .collect();
        let out = global_signal_regress(&x).unwrap();
        for r in 0..x.r {
            let col = out.column(r);
            let dot_one: f64 = col.iter().sum();
            let dot_g: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
            assert!(dot_one.abs() < 1e-8, "intercept leak {dot_one}");
            assert!(dot_g.abs() < 1e-8, "slope leak {dot_g}");
        }
    }

    #[test]
    fn gsr_rejects_constant_global_mean() {
        let x = series(20, 3, |_, r| r as f64);
        assert!(matches!(
            global_signal_regress(&x),
            Err(Error::DegenerateRegressor(_))
        ));
    }

    #[test]
    fn butterworth_cutoffs_sit_at_minus_3db() {
        let sos = butterworth_bandpass_sos(0.009, 0.25, 4, FS).unwrap();
        let target = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(cascade_gain(&sos, 0.009, FS), target, epsilon = 0.01);
        assert_relative_eq!(cascade_gain(&sos, 0.25, FS), target, epsilon = 0.01);
        // Band center passes, far out-of-band is crushed.
        let center = (0.009f64 * 0.25).sqrt();
        let g_mid = cascade_gain(&sos, center, FS);
        assert!((0.95..=1.0 + 1e-9).contains(&g_mid), "center gain {g_mid}");
        assert!(cascade_gain(&sos, 0.69, FS) < 0.01);
        assert!(cascade_gain(&sos, 0.0005, FS) < 0.01);
    }

    #[test]
    fn bandpass_band_rejects_bad_ranges() {
        assert!(butterworth_bandpass_sos(0.0, 0.25, 4, FS).is_err());
        assert!(butterworth_bandpass_sos(0.3, 0.25, 4, FS).is_err());
        assert!(butterworth_bandpass_sos(0.009, 0.8, 4, FS).is_err());
    }

    #[test]
    fn zero_phase_kills_dc_and_preserves_symmetry() {
        let sos = butterworth_bandpass_sos(0.009, 0.25, 4, FS).unwrap();
        let constant = vec![3.25; 400];
        let out = sosfiltfilt(&sos, &constant).unwrap();
        for v in &out[50..350] {
            assert!(v.abs() < 1e-6, "{v}");
        }
        // Symmetric pulse in, symmetric pulse out.
        let n = 801;
        let pulse: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - 400.0) / 12.0).powi(2)).exp())
            .collect();
        let out = sosfiltfilt(&sos, &pulse).unwrap();
        let worst = |from: usize| {
            (from..=400)
                .map(|i| (out[i] - out[n - 1 - i]).abs())
                .fold(0.0f64, f64::max)
        };
        // Exact symmetry holds in the infinite-padding limit; the finite
        // reflection padding leaves an edge transient that decays inward.
        assert!(worst(0) < 1e-3, "edge asymmetry {}", worst(0));
        assert!(worst(150) < 1e-4, "interior asymmetry {}", worst(150));
        assert!(worst(300) < 1e-5, "deep interior asymmetry {}", worst(300));
    }

    #[test]
    fn steady_state_init_removes_step_transient() {
        let sos = butterworth_bandpass_sos(0.009, 0.25, 4, FS).unwrap();
        let s = sos[0];
        let zi = s.unit_state();
        let x = vec![2.0; 50];
        let z = [zi[0] * 2.0, zi[1] * 2.0];
        let y = s.filter(&x, z);
        // With steady-state init the output is H(1)·x from sample 0.
        let h1 = s.response(0.0).re * 2.0;
        for v in &y {
            assert!((v - h1).abs() < 1e-12, "{v} vs {h1}");
        }
    }

    #[test]
    fn pearson_exact_relations() {
        let x = series(20, 3, |t, r| {
            let base = (t as f64 * 0.7).sin() + 0.1 * t as f64;
            match r {
                0 => base,
                1 => 2.0 * base + 3.0,
                _ => -base,
            }
        });
        let m = pearson_connectome(&x).unwrap();
        assert_relative_eq!(m.at(0, 1), 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.at(0, 2), -1.0, epsilon = 1e-12);
        assert_relative_eq!(m.at(1, 2), -1.0, epsilon = 1e-12);
        for i in 0..3 {
            assert_eq!(m.at(i, i), 1.0);
        }
    }

    #[test]
    fn pearson_flags_flat_region() {
        let x = series(10, 3, |t, r| if r == 1 { 4.0 } else { t as f64 });
        match pearson_connectome(&x).unwrap_err() {
            Error::DegenerateSeries { region } => assert_eq!(region, 1),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn feature_vector_is_strict_upper_triangle() {
        let m = ConnectomeMatrix {
            values: vec![1.0, 0.5, 0.2, 0.5, 1.0, -0.3, 0.2, -0.3, 1.0],
            r: 3,
        };
        assert_eq!(connectome_features(&m), vec![0.5, 0.2, -0.3]);
        let big = ConnectomeMatrix { values: vec![0.0; 374 * 374], r: 374 };
        assert_eq!(connectome_features(&big).len(), 69751);
    }

    fn cluster_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let centers = [[2.0, 0.0, 0.0, 1.0], [-2.0, 1.0, 0.0, -1.0], [0.0, -2.0, 2.0, 0.0]];
        for i in 0..n {
            let c = i % 3;
            let mut rng = stream(seed, "clusters", &[i as u64]);
            let x: Vec<f64> = centers[c]
                .iter()
                .map(|&m| m + 0.4 * (rng.gen::<f64>() * 2.0 - 1.0))
                .collect();
            xs.push(x);
            ys.push(c);
        }
        (xs, ys)
    }

    #[test]
    fn plain_logistic_separates_clusters() {
        let (xs, ys) = cluster_data(60, 5);
        let fit = logistic_fit(&xs, &ys, None).unwrap();
        assert_eq!(fit.model.accuracy(&xs, &ys), 1.0);
        assert!(fit.selected_c.is_none());
    }

    #[test]
    fn l1_extreme_penalty_zeroes_weights() {
        let (xs, ys) = cluster_data(30, 7);
        let m = logistic_fit_l1(&xs, &ys, 1e-6).unwrap();
        assert_eq!(m.nonzero_weights(), 0, "weights should all be soft-thresholded away");
        // Prediction falls back to the bias = majority class structure.
        let majority = m.predict(&xs[0]);
        for x in &xs {
            assert_eq!(m.predict(x), majority);
        }
    }

    #[test]
    fn l1_sparsity_monotone_in_c() {
        let (xs, ys) = cluster_data(45, 11);
        let grid: Vec<f64> = (-3..=3).map(|c| 10f64.powi(c)).collect();
        let nnz: Vec<usize> = grid
            .iter()
            .map(|&c| logistic_fit_l1(&xs, &ys, c).unwrap().nonzero_weights())
            .collect();
        let mut violations = 0;
        for w in nnz.windows(2) {
            if w[1] < w[0] {
                violations += 1;
            }
        }
        assert!(violations <= 1, "non-monotone sparsity {nnz:?}");
    }

    #[test]
    fn cv_selection_matches_brute_force() {
        let (xs, ys) = cluster_data(60, 13);
        let opt = L1Options { seed: 3, ..Default::default() };
        let fit = logistic_fit(&xs, &ys, Some(opt.clone())).unwrap();
        // Brute force over the same folds.
        let assignment = cv_folds(&ys, opt.folds, opt.seed);
        let mut best = (f64::NAN, -1.0);
        for &c_val in &opt.c_grid {
            let mut acc = 0.0;
            for fold in 0..opt.folds {
                let (mut txs, mut tys, mut vxs, mut vys) = (vec![], vec![], vec![], vec![]);
                for i in 0..xs.len() {
                    if assignment[i] == fold {
                        vxs.push(xs[i].clone());
                        vys.push(ys[i]);
                    } else {
                        txs.push(xs[i].clone());
                        tys.push(ys[i]);
                    }
                }
                acc += logistic_fit_l1(&txs, &tys, c_val).unwrap().accuracy(&vxs, &vys);
            }
            acc /= opt.folds as f64;
            if acc > best.1 {
                best = (c_val, acc);
            }
        }
        assert_eq!(fit.selected_c.unwrap(), best.0);
    }

    #[test]
    fn logistic_rejects_single_class() {
        let xs = vec![vec![1.0, 2.0]; 6];
        let ys = vec![0usize; 6];
        assert!(matches!(
            logistic_fit(&xs, &ys, None),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn fcnn_shapes_and_separable_fit() {
        let (xs, ys) = cluster_data(36, 17);
        let m = fcnn_fit(&xs, &ys, 320, 150, 1).unwrap();
        assert_eq!(m.hidden, 320);
        assert_eq!(m.classes, 3);
        let fc2 = m.store.get(m.store.index_of("fc2.w").unwrap());
        assert_eq!(fc2.shape, vec![320, 320]);
        assert_eq!(m.accuracy(&xs, &ys).unwrap(), 1.0);
    }

    #[test]
    fn pipeline_on_white_noise_stays_decorrelated() {
        // Two finite-sample effects set the floor here: GSR induces a
        // −1/(R−1) anticorrelation, and the double (zero-phase) pass narrows
        // the effective band, so the corr noise floor decays like ~1.6/√T
        // rather than the single-pass asymptote. R=32, T=480 puts the
        // expected mean near 0.10.
        let x = series(480, 32, |t, r| {
            let mut rng = stream(23, "white", &[t as u64, r as u64]);
            rng.gen::<f64>() * 2.0 - 1.0
        });
        let feats = pipeline_features(&x, 0.009, 0.25, 4).unwrap();
        let mean_abs: f64 = feats.iter().map(|v| v.abs()).sum::<f64>() / feats.len() as f64;
        assert!(mean_abs < 0.15, "mean |corr| {mean_abs}");
    }

    #[test]
    fn csv_round_trip() {
        let x = series(5, 3, |t, r| t as f64 + 0.25 * r as f64);
        let back = ParcelSeries::from_csv(&x.to_csv(), x.sample_period_s).unwrap();
        assert_eq!(back.values, x.values);
        assert!(ParcelSeries::from_csv("bogus\n1,2\n", 0.72).is_err());
    }

    #[test]
    fn coupled_pairs_show_up_in_features() {
        let (xs, ys) = synthetic_connectome_task(3, 6, 16, 160, 0.72, 2.0, 31).unwrap();
        assert_eq!(xs.len(), 18);
        // The coupled pair for class 0 is region pair (0,1) = feature 0;
        // it must stand far above the uncoupled background even after GSR
        // partially absorbs the shared latent.
        let mut pair = 0.0;
        let mut background = 0.0;
        let mut n_bg = 0usize;
        for (x, &y) in xs.iter().zip(&ys) {
            if y != 0 {
                continue;
            }
            let f = pipeline_features(x, 0.009, 0.25, 4).unwrap();
            pair += f[0];
            // Features among regions 6..16, which no class couples.
            let mut k = 0;
            for i in 0..16 {
                for j in i + 1..16 {
                    if i >= 6 && j >= 6 {
                        background += f[k].abs();
                        n_bg += 1;
                    }
                    k += 1;
                }
            }
        }
        pair /= 6.0;
        background /= n_bg as f64;
        assert!(
            pair > 0.25 && pair > 2.0 * background,
            "pair {pair} vs background {background}"
        );
    }
}
