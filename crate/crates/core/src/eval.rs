//! Metrics: NMSE, beam selection, achievable sum rate, latency, reports.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::cgan::{estimate_coarse, CganModel};
use crate::channel::{dft_matrix, Domain};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ridnet::{denoise, RidnetModel};

/// Lowest reportable NMSE; exact estimates are clamped here instead of -inf.
pub const NMSE_FLOOR_DB: f64 = -120.0;
/// Ridge added to a singular Gram matrix in the zero-forcing precoder.
pub const ZF_RIDGE: f64 = 1e-6;

/// Mean over samples of `||Ĥ - H||² / ||H||²` (linear).
pub fn nmse_ratio(estimates: &[DMatrix<Complex64>], truths: &[DMatrix<Complex64>]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} channels",
            estimates.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::invalid("NMSE of an empty set"));
    }
    let mut sum = 0.0;
    for (i, (e, h)) in estimates.iter().zip(truths).enumerate() {
        if e.shape() != h.shape() {
            return Err(Error::invalid(format!(
                "sample {i}: estimate is {:?}, channel is {:?}",
                e.shape(),
                h.shape()
            )));
        }
        let power = h.norm_squared();
        if power == 0.0 {
            return Err(Error::invalid(format!("sample {i}: true channel is identically zero")));
        }
        sum += (e - h).norm_squared() / power;
    }
    Ok(sum / truths.len() as f64)
}

/// [`nmse_ratio`] in dB, floored at [`NMSE_FLOOR_DB`].
pub fn nmse_db(estimates: &[DMatrix<Complex64>], truths: &[DMatrix<Complex64>]) -> Result<f64> {
    let r = nmse_ratio(estimates, truths)?;
    Ok((10.0 * r.log10()).max(NMSE_FLOOR_DB))
}

/// Anything producing spatial-domain channel estimates for test samples.
pub trait ChannelEstimator {
    fn label(&self) -> String;
    fn estimate(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>>;
}

const BATCH: usize = 64;

fn coarse_estimates(cgan: &CganModel, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(BATCH) {
        let obs: Vec<_> = chunk.iter().map(|&i| data.observation(i)).collect();
        let pil: Vec<_> = chunk.iter().map(|&i| data.pilots(i)).collect();
        out.extend(cgan.estimate_batch(&obs.iter().collect::<Vec<_>>(), &pil.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

/// Stage 1 alone.
pub struct CganEstimator<'a>(pub &'a CganModel);

impl ChannelEstimator for CganEstimator<'_> {
    fn label(&self) -> String {
        "cGAN".into()
    }

    fn estimate(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>> {
        coarse_estimates(self.0, data, idx)
    }
}

/// Both stages; the label marks an angular-domain denoiser with `*`.
pub struct TwoStageEstimator<'a> {
    pub cgan: &'a CganModel,
    pub ridnet: &'a RidnetModel,
}

impl ChannelEstimator for TwoStageEstimator<'_> {
    fn label(&self) -> String {
        match self.ridnet.domain {
            Domain::Spatial => "cGAN-RIDNet".into(),
            Domain::Angular => "cGAN-RIDNet*".into(),
        }
    }

    fn estimate(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>> {
        let coarse = coarse_estimates(self.cgan, data, idx)?;
        let mut out = Vec::with_capacity(coarse.len());
        for chunk in coarse.chunks(BATCH) {
            out.extend(self.ridnet.refine_batch(chunk, Domain::Spatial)?);
        }
        Ok(out)
    }
}

/// Non-learned reference: the matched-filter image `Y Pᴴ / Q` times a
/// real gain fitted by least squares on a training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedFilterBaseline {
    pub gain: f64,
}

fn matched_filter(y: &DMatrix<Complex64>, p: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (y * p.adjoint()) / Complex64::new(p.ncols() as f64, 0.0)
}

impl MatchedFilterBaseline {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..train.len() {
            let x = matched_filter(&train.observation(i), &train.pilots(i));
            let h = train.channel(i);
            num += x.iter().zip(h.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
            den += x.norm_squared();
        }
        if den == 0.0 {
            return Err(Error::invalid("cannot fit a gain on an all-zero corpus"));
        }
        Ok(Self { gain: num / den })
    }
}

impl ChannelEstimator for MatchedFilterBaseline {
    fn label(&self) -> String {
        "MF".into()
    }

    fn estimate(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>> {
        Ok(idx
            .iter()
            .map(|&i| matched_filter(&data.observation(i), &data.pilots(i)) * Complex64::new(self.gain, 0.0))
            .collect())
    }
}

/// Returns the true channel (perfect CSI).
pub struct PerfectCsi;

impl ChannelEstimator for PerfectCsi {
    fn label(&self) -> String {
        "perfect-CSI".into()
    }

    fn estimate(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<DMatrix<Complex64>>> {
        Ok(idx.iter().map(|&i| data.channel(i)).collect())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: String,
    pub num_antennas: usize,
    pub num_users: usize,
    pub num_pilots: usize,
    pub snr_db: f64,
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
}

/// A grid cell that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub estimator: String,
    pub num_antennas: usize,
    pub num_users: usize,
    pub num_pilots: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub errors: Vec<CellError>,
}

pub const CSV_HEADER: &str = "estimator,N,K,Q,snr_db,metric,value,sample_count";

impl Report {
    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
        self.errors.extend(other.errors);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.estimator, r.num_antennas, r.num_users, r.num_pilots, r.snr_db, r.metric, r.value, r.sample_count
            )
            .unwrap();
        }
        s
    }

    /// Write `<stem>.csv`, plus `<stem>_errors.csv` when cells failed.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.csv"));
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        if !self.errors.is_empty() {
            let mut s = String::from("estimator,N,K,Q,message\n");
            for e in &self.errors {
                let msg = e.message.replace([',', '\n'], ";");
                writeln!(s, "{},{},{},{},{}", e.estimator, e.num_antennas, e.num_users, e.num_pilots, msg).unwrap();
            }
            let path = dir.join(format!("{stem}_errors.csv"));
            fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Value of `metric` for `(estimator, Q, snr)`, if present.
    pub fn value(&self, estimator: &str, num_pilots: usize, metric: &str, snr_db: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.num_pilots == num_pilots && r.metric == metric && r.snr_db == snr_db)
            .map(|r| r.value)
    }

    /// `(snr, value)` pairs of one series, in row order.
    pub fn series(&self, estimator: &str, num_pilots: usize, num_antennas: usize, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| {
                r.estimator == estimator && r.num_pilots == num_pilots && r.num_antennas == num_antennas && r.metric == metric
            })
            .map(|r| (r.snr_db, r.value))
            .collect()
    }
}

/// One `(N, K, Q)` test corpus and the estimator to score on it. An
/// `Err` estimator (e.g. a missing checkpoint) is recorded, not fatal.
pub struct GridCell<'a> {
    pub test: &'a Dataset,
    pub label: String,
    pub estimator: std::result::Result<&'a dyn ChannelEstimator, String>,
}

impl<'a> GridCell<'a> {
    pub fn new(test: &'a Dataset, estimator: &'a dyn ChannelEstimator) -> Self {
        Self {
            test,
            label: estimator.label(),
            estimator: Ok(estimator),
        }
    }

    pub fn missing(test: &'a Dataset, label: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            test,
            label: label.into(),
            estimator: Err(reason.into()),
        }
    }
}

fn distinct_snrs(data: &Dataset) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &s in &data.manifest.snr_grid_db {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn cell_error(cell: &GridCell, message: String) -> CellError {
    let m = &cell.test.manifest;
    CellError {
        estimator: cell.label.clone(),
        num_antennas: m.num_antennas,
        num_users: m.num_users,
        num_pilots: m.num_pilots,
        message,
    }
}

/// NMSE per SNR of every cell: one `nmse_db` row per `(cell, snr)`.
pub fn evaluate_grid(cells: &[GridCell]) -> Report {
    let mut report = Report::default();
    for cell in cells {
        let est = match &cell.estimator {
            Ok(e) => *e,
            Err(msg) => {
                report.errors.push(cell_error(cell, msg.clone()));
                continue;
            }
        };
        let m = &cell.test.manifest;
        let rows: Result<Vec<ReportRow>> = distinct_snrs(cell.test)
            .into_iter()
            .map(|snr| {
                let idx = cell.test.indices_at_snr(snr);
                let truths: Vec<_> = idx.iter().map(|&i| cell.test.channel(i)).collect();
                let value = nmse_db(&est.estimate(cell.test, &idx)?, &truths)?;
                Ok(ReportRow {
                    estimator: cell.label.clone(),
                    num_antennas: m.num_antennas,
                    num_users: m.num_users,
                    num_pilots: m.num_pilots,
                    snr_db: snr,
                    metric: "nmse_db".into(),
                    value,
                    sample_count: idx.len(),
                })
            })
            .collect();
        match rows {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => report.errors.push(cell_error(cell, e.to_string())),
        }
    }
    report
}

/// Interference-aware beam selection (simplified): users in decreasing
/// order of peak beam magnitude each take their strongest beam not yet
/// claimed. Returns one distinct beam (row of the angular channel) per user.
pub fn ia_beam_select(h_angular: &DMatrix<Complex64>, num_users: usize) -> Result<Vec<usize>> {
    let n = h_angular.nrows();
    if num_users != h_angular.ncols() {
        return Err(Error::invalid(format!(
            "{num_users} users requested for a channel with {} columns",
            h_angular.ncols()
        )));
    }
    if num_users > n {
        return Err(Error::invalid(format!("cannot select {num_users} distinct beams from {n}")));
    }
    let mag = |b: usize, k: usize| h_angular[(b, k)].norm();
    let peak = |k: usize| (0..n).map(|b| mag(b, k)).fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..num_users).collect();
    // Stable sort keeps lower user index first on ties.
    order.sort_by(|&a, &b| peak(b).total_cmp(&peak(a)));
    let mut claimed = vec![false; n];
    let mut beams = vec![0; num_users];
    for k in order {
        let best = (0..n)
            .filter(|&b| !claimed[b])
            .fold(None, |acc: Option<usize>, b| match acc {
                Some(a) if mag(a, k) >= mag(b, k) => Some(a),
                _ => Some(b),
            })
            .expect("K <= N leaves an unclaimed beam");
        claimed[best] = true;
        beams[k] = best;
    }
    Ok(beams)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumRate {
    /// bits/s/Hz.
    pub rate: f64,
    /// The estimate's Gram matrix was singular and the ridge was applied.
    pub regularized: bool,
}

/// Reduced `K x K` downlink channel on `beams`: row `k` is user `k`'s
/// conjugated beamspace gains.
fn reduced(h_angular: &DMatrix<Complex64>, beams: &[usize]) -> DMatrix<Complex64> {
    let k = h_angular.ncols();
    DMatrix::from_fn(k, beams.len(), |u, j| h_angular[(beams[j], u)].conj())
}

/// Achievable sum rate with beams chosen and zero-forcing computed on the
/// estimate, rates evaluated on the true channel. Both inputs are in the
/// angular domain; unit noise, equal power `ρ/K` per user.
pub fn sum_rate(truth_angular: &DMatrix<Complex64>, estimate_angular: &DMatrix<Complex64>, snr_db: f64) -> Result<SumRate> {
    if truth_angular.shape() != estimate_angular.shape() {
        return Err(Error::invalid("true and estimated channels differ in shape"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    let k = truth_angular.ncols();
    let beams = ia_beam_select(estimate_angular, k)?;
    let g_est = reduced(estimate_angular, &beams);
    let g_true = reduced(truth_angular, &beams);

    let gram = &g_est * g_est.adjoint();
    let (inv, regularized) = match gram.clone().try_inverse().filter(|m| m.iter().all(|v| v.re.is_finite() && v.im.is_finite())) {
        Some(inv) if rcond_ok(&gram) => (inv, false),
        _ => {
            let ridge = DMatrix::<Complex64>::identity(k, k) * Complex64::new(ZF_RIDGE, 0.0);
            let inv = (gram + ridge).try_inverse().ok_or_else(|| Error::invalid("ridge-regularized Gram matrix is singular"))?;
            (inv, true)
        }
    };
    let mut w = g_est.adjoint() * inv;
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 && norm.is_finite() {
            col /= Complex64::new(norm, 0.0);
        } else {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    let p = 10f64.powf(snr_db / 10.0) / k as f64;
    let gains = &g_true * &w;
    let rate = (0..k)
        .map(|u| {
            let signal = p * gains[(u, u)].norm_sqr();
            let interference: f64 = (0..k).filter(|&j| j != u).map(|j| p * gains[(u, j)].norm_sqr()).sum();
            (1.0 + signal / (interference + 1.0)).log2()
        })
        .sum();
    Ok(SumRate { rate, regularized })
}

/// Reciprocal condition estimate via the diagonal of the Cholesky factor.
fn rcond_ok(gram: &DMatrix<Complex64>) -> bool {
    match gram.clone().cholesky() {
        Some(c) => {
            let d: Vec<f64> = c.l().diagonal().iter().map(|v| v.re).collect();
            let max = d.iter().cloned().fold(0.0, f64::max);
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            max > 0.0 && (min / max).powi(2) > 1e-12
        }
        None => false,
    }
}

/// Mean sum rate per SNR for each estimator, on the test samples drawn at
/// that SNR. Each estimator row also reports how many realizations needed
/// the ridge (`zf_regularized` metric).
pub fn evaluate_sum_rate(test: &Dataset, estimators: &[&dyn ChannelEstimator], snrs: &[f64]) -> Result<Report> {
    let m = &test.manifest;
    let u = dft_matrix(m.num_antennas)?.matrix;
    let mut report = Report::default();
    for &snr in snrs {
        let idx = test.indices_at_snr(snr);
        if idx.is_empty() {
            return Err(Error::invalid(format!("test corpus has no samples at {snr} dB")));
        }
        let truths: Vec<_> = idx.iter().map(|&i| &u * test.channel(i)).collect();
        for est in estimators {
            let estimates = est.estimate(test, &idx)?;
            let (mut total, mut ridged) = (0.0, 0usize);
            for (h, e) in truths.iter().zip(&estimates) {
                let r = sum_rate(h, &(&u * e), snr)?;
                total += r.rate;
                ridged += r.regularized as usize;
            }
            let row = |metric: &str, value: f64| ReportRow {
                estimator: est.label(),
                num_antennas: m.num_antennas,
                num_users: m.num_users,
                num_pilots: m.num_pilots,
                snr_db: snr,
                metric: metric.into(),
                value,
                sample_count: idx.len(),
            };
            report.rows.push(row("sum_rate_bps_hz", total / idx.len() as f64));
            report.rows.push(row("zf_regularized", ridged as f64));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl LatencyStats {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = if ms.len() > 1 {
            ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub cgan: LatencyStats,
    pub ridnet: LatencyStats,
    pub combined: LatencyStats,
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
}

impl TimingReport {
    pub fn ridnet_to_cgan_ratio(&self) -> f64 {
        self.ridnet.mean_ms / self.cgan.mean_ms
    }

    /// `|combined - (cgan + ridnet)| / combined`.
    pub fn additivity_gap(&self) -> f64 {
        (self.combined.mean_ms - (self.cgan.mean_ms + self.ridnet.mean_ms)).abs() / self.combined.mean_ms
    }

    pub fn to_report(&self, n: usize, k: usize, q: usize) -> Report {
        let mut rows = Vec::new();
        for (label, s) in [("cGAN", self.cgan), ("RIDNet", self.ridnet), ("cGAN-RIDNet", self.combined)] {
            for (metric, v) in [("latency_ms_mean", s.mean_ms), ("latency_ms_std", s.std_ms)] {
                rows.push(ReportRow {
                    estimator: label.into(),
                    num_antennas: n,
                    num_users: k,
                    num_pilots: q,
                    snr_db: f64::NAN,
                    metric: metric.into(),
                    value: v,
                    sample_count: self.iterations,
                });
            }
        }
        Report { rows, errors: Vec::new() }
    }
}

/// Per-sample latency at batch size one of stage 1 alone, stage 2 alone on
/// a precomputed coarse estimate, and both stages, after `warmup`
/// unmeasured iterations.
pub fn timing_benchmark(
    cgan: &CganModel,
    ridnet: &RidnetModel,
    samples: &[(DMatrix<Complex64>, DMatrix<Complex64>)],
    warmup: usize,
    iterations: usize,
) -> Result<TimingReport> {
    if iterations == 0 {
        return Err(Error::config("timing_iterations", "at least one measured iteration is required"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("timing needs at least one observation"));
    }
    let coarse: Vec<_> = samples
        .iter()
        .map(|(y, p)| estimate_coarse(y, p, cgan))
        .collect::<Result<_>>()?;
    // The three measurements are interleaved per iteration so that clock or
    // load drift affects all of them alike.
    let mut ms = [Vec::with_capacity(iterations), Vec::with_capacity(iterations), Vec::with_capacity(iterations)];
    for i in 0..warmup + iterations {
        let (y, p) = &samples[i % samples.len()];
        let t = Instant::now();
        std::hint::black_box(estimate_coarse(y, p, cgan)?);
        let a = t.elapsed();
        let t = Instant::now();
        std::hint::black_box(denoise(&coarse[i % coarse.len()], ridnet, ridnet.domain)?);
        let b = t.elapsed();
        let t = Instant::now();
        let c = estimate_coarse(y, p, cgan)?;
        std::hint::black_box(denoise(&c, ridnet, ridnet.domain)?);
        let d = t.elapsed();
        if i >= warmup {
            for (v, e) in ms.iter_mut().zip([a, b, d]) {
                v.push(e.as_secs_f64() * 1e3);
            }
        }
    }
    let [cgan_stats, ridnet_stats, combined] = ms.map(|v| LatencyStats::from_samples(&v));
    Ok(TimingReport {
        cgan: cgan_stats,
        ridnet: ridnet_stats,
        combined,
        batch_size: 1,
        warmup,
        iterations,
    })
}

/// One line series of a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Minimal SVG line plot.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 170.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (ml + w - mr) / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    )
    .unwrap();
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, px(fx), h - mb + 16.0, trim(fx)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, ml - 6.0, py(fy) + 4.0, trim(fy)).unwrap();
        writeln!(s, r##"<line x1="{ml}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, w - mr, py(fy), py(fy)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 12.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
        for p in &path {
            let (cx, cy) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = mt + 14.0 + 18.0 * i as f64;
        writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 36.0, ly + 4.0, escape(&ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, k, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn nmse_trivial_values() {
        let h = vec![random(6, 3, 1), random(6, 3, 2)];
        assert_eq!(nmse_db(&h, &h).unwrap(), NMSE_FLOOR_DB);
        let zeros: Vec<_> = h.iter().map(|m| m * Complex64::new(0.0, 0.0)).collect();
        assert!(nmse_db(&zeros, &h).unwrap().abs() < 1e-12);
        let double: Vec<_> = h.iter().map(|m| m * Complex64::new(2.0, 0.0)).collect();
        assert!(nmse_db(&double, &h).unwrap().abs() < 1e-12);
        assert!(nmse_db(&h, &zeros).is_err());
        assert!(nmse_db(&h[..1], &h).is_err());
    }

    #[test]
    fn beam_select_examples() {
        let mut h = DMatrix::<Complex64>::zeros(4, 1);
        h[(2, 0)] = Complex64::new(0.0, 3.0);
        h[(0, 0)] = Complex64::new(1.0, 0.0);
        assert_eq!(ia_beam_select(&h, 1).unwrap(), vec![2]);

        let mut h = DMatrix::<Complex64>::zeros(4, 2);
        h[(1, 0)] = Complex64::new(2.0, 0.0);
        h[(1, 1)] = Complex64::new(1.0, 0.0);
        h[(3, 1)] = Complex64::new(0.5, 0.0);
        assert_eq!(ia_beam_select(&h, 2).unwrap(), vec![1, 3]);
        assert!(ia_beam_select(&DMatrix::zeros(2, 3), 3).is_err());
    }

    #[test]
    fn single_user_rate_closed_form() {
        let mut h = DMatrix::<Complex64>::zeros(8, 1);
        h[(5, 0)] = Complex64::new(0.6, -0.8);
        h[(1, 0)] = Complex64::new(0.1, 0.0);
        let r = sum_rate(&h, &h, 10.0).unwrap();
        let expected = (1.0 + 10.0 * h[(5, 0)].norm_sqr()).log2();
        assert!((r.rate - expected).abs() < 1e-12);
        assert!(!r.regularized);
    }

    #[test]
    fn zero_estimate_is_regularized_and_non_negative() {
        let h = random(8, 3, 4);
        let r = sum_rate(&h, &DMatrix::zeros(8, 3), 20.0).unwrap();
        assert!(r.regularized);
        assert!(r.rate >= 0.0);
    }

    #[test]
    fn timing_requires_iterations() {
        let cfg = crate::cgan::CganTrainConfig::from(&crate::config::ExperimentConfig::desk());
        let cgan = CganModel::new(8, 2, 2, &cfg, 1.0);
        let rcfg = crate::ridnet::RidnetTrainConfig::from(&crate::config::ExperimentConfig::desk());
        let rid = RidnetModel::new(8, 2, Domain::Spatial, 1.0, &rcfg).unwrap();
        let err = timing_benchmark(&cgan, &rid, &[], 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = render_svg(
            "t <x>",
            "SNR",
            "NMSE",
            &[Series {
                label: "a".into(),
                points: vec![(0.0, -1.0), (5.0, -3.0)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t &lt;x&gt;"));
    }
}
