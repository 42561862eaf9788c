//! Distribution distances between sample sets and the significance tests used
//! to compare them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{ensure_same_len, Error, Result};

/// Bins per dimension for joint histograms.
pub const JOINT_BINS: usize = 10;
/// Bins for one-dimensional geometric histograms.
pub const GEOMETRY_BINS: usize = 100;

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Empty(what));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact 1D Wasserstein-1 distance between two empirical distributions,
/// integrating the gap between quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_finite(a, "first sample")?;
    check_finite(b, "second sample")?;
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len(), b.len());
    // walk the merged breakpoints i/na and j/nb using integer cross-multiplication
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let denom = (na as u128) * (nb as u128);
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i as u128 + 1) * nb as u128;
        let next_b = (j as u128 + 1) * na as u128;
        let next = next_a.min(next_b);
        total += (next - prev) as f64 / denom as f64 * (a[i] - b[j]).abs();
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total)
}

fn kl_nats(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("histogram entries must be finite and >= 0".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("distribution sums to {s}")));
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats.
pub fn jsd_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len(p.len(), q.len())?;
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl_nats(p, &m) + 0.5 * kl_nats(q, &m);
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

/// Normalised counts of integer labels in `0..k`.
pub fn label_histogram(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut h = vec![0.0; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Domain(format!("label {l} out of range for K={k}")));
        }
        h[l] += 1.0;
    }
    let n = labels.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

/// Normalised counts of string labels over the union of both label sets.
pub fn jsd_labels(a: &[String], b: &[String]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let mut keys: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for l in a {
        keys.entry(l).or_default().0 += 1.0 / a.len() as f64;
    }
    for l in b {
        keys.entry(l).or_default().1 += 1.0 / b.len() as f64;
    }
    let (p, q): (Vec<f64>, Vec<f64>) = keys.values().copied().unzip();
    // renormalise away accumulated roundoff
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    jsd_categorical(&p.iter().map(|v| v / sp).collect::<Vec<_>>(), &q.iter().map(|v| v / sq).collect::<Vec<_>>())
}

/// Continuous and categorical sample columns with equal row counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleTable {
    pub continuous: BTreeMap<String, Vec<f64>>,
    pub categorical: BTreeMap<String, Vec<String>>,
}

impl SampleTable {
    pub fn validate(&self) -> Result<usize> {
        let mut rows = None;
        let lens = self
            .continuous
            .values()
            .map(Vec::len)
            .chain(self.categorical.values().map(Vec::len));
        for n in lens {
            match rows {
                None => rows = Some(n),
                Some(r) => ensure_same_len(r, n)?,
            }
        }
        for (name, col) in &self.continuous {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("column {name} has non-finite values")));
            }
        }
        Ok(rows.unwrap_or(0))
    }

    pub fn n_rows(&self) -> usize {
        self.validate().unwrap_or(0)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.continuous
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("missing continuous column {name}")))
    }

    /// Rows at the given indices.
    pub fn select(&self, rows: &[usize]) -> SampleTable {
        SampleTable {
            continuous: self
                .continuous
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r]).collect()))
                .collect(),
            categorical: self
                .categorical
                .iter()
                .map(|(k, v)| (k.clone(), rows.iter().map(|&r| v[r].clone()).collect()))
                .collect(),
        }
    }
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
    if pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

fn joint_counts(table: &SampleTable, columns: &[&str], edges: &[(f64, f64)], bins: usize) -> Result<Vec<f64>> {
    let cols: Vec<&[f64]> = columns.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    let n = cols[0].len();
    if n == 0 {
        return Err(Error::Empty("sample table"));
    }
    let mut h = vec![0.0; bins.pow(columns.len() as u32)];
    for r in 0..n {
        let mut idx = 0;
        for (c, col) in cols.iter().enumerate() {
            idx = idx * bins + bin_of(col[r], edges[c].0, edges[c].1, bins);
        }
        h[idx] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= n as f64);
    Ok(h)
}

/// JSD between flattened joint histograms. Bin edges come from the min/max of
/// `reference`; values outside are clamped into the edge bins.
pub fn jsd_joint_histogram(reference: &SampleTable, other: &SampleTable, columns: &[&str], bins: usize) -> Result<f64> {
    if columns.is_empty() {
        return Err(Error::Empty("columns"));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be >= 1".into()));
    }
    reference.validate()?;
    other.validate()?;
    let mut edges = Vec::with_capacity(columns.len());
    for c in columns {
        let col = reference.column(c)?;
        check_finite(col, "reference column")?;
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::Domain(format!("column {c} has zero-width range")));
        }
        edges.push((lo, hi));
    }
    let p = joint_counts(reference, columns, &edges, bins)?;
    let q = joint_counts(other, columns, &edges, bins)?;
    jsd_categorical(&p, &q)
}

/// JSD between 1D histograms with edges from the reference sample.
pub fn jsd_histogram_1d(reference: &[f64], other: &[f64], bins: usize) -> Result<f64> {
    let mut a = SampleTable::default();
    a.continuous.insert("x".into(), reference.to_vec());
    let mut b = SampleTable::default();
    b.continuous.insert("x".into(), other.to_vec());
    jsd_joint_histogram(&a, &b, &["x"], bins)
}

fn mean_cov(rows: &[Vec<f64>]) -> Result<(nalgebra::DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Domain("need at least two rows per feature set".into()));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(Error::Empty("feature vector"));
    }
    for r in rows {
        ensure_same_len(d, r.len())?;
        check_finite(r, "feature row")?;
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    ensure_same_len(mu_a.len(), mu_b.len())?;
    // Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})
    let sa = psd_sqrt(cov_a.clone());
    let inner = &sa * &cov_b * &sa;
    let cross = psd_sqrt(inner).trace();
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStats {
    pub mean: f64,
    pub std: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Resamples `b` with replacement `n_boot` times (each of size `boot_size`) and
/// reports the mean and sample standard deviation of the metric.
pub fn bootstrap_metric<T: Clone, F, R>(
    metric: F,
    a: &[T],
    b: &[T],
    n_boot: usize,
    boot_size: usize,
    rng: &mut R,
) -> Result<BootstrapStats>
where
    F: Fn(&[T], &[T]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if b.is_empty() {
        return Err(Error::Empty("bootstrap sample"));
    }
    if n_boot == 0 || boot_size == 0 {
        return Err(Error::Config("bootstrap needs n_boot, boot_size >= 1".into()));
    }
    let mut values = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let draw: Vec<T> = (0..boot_size).map(|_| b[rng.gen_range(0..b.len())].clone()).collect();
        values.push(metric(a, &draw)?);
    }
    let m = mean(&values);
    let std = if n_boot > 1 { variance(&values).max(0.0).sqrt() } else { 0.0 };
    Ok(BootstrapStats { mean: m, std })
}

/// Two-sided Welch t-test.
pub fn two_sample_ttest(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Domain("t-test needs at least two points per sample".into()));
    }
    check_finite(x, "first sample")?;
    check_finite(y, "second sample")?;
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (variance(x) / nx, variance(y) / ny);
    let diff = mean(x) - mean(y);
    let se2 = vx + vy;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 { 1.0 } else { 0.0 });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Two-sided Mann–Whitney U test, normal approximation with tie correction and
/// continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<f64> {
    check_finite(x, "first sample")?;
    check_finite(y, "second sample")?;
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let r = ranks(&all);
    let r1: f64 = r[..x.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted_all = all.clone();
    sorted_all.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted_all.len() {
        let mut j = i;
        while j + 1 < sorted_all.len() && sorted_all[j + 1] == sorted_all[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Ok(1.0);
    }
    let mu = n1 * n2 / 2.0;
    let z = ((u1 - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * normal.sf(z)).clamp(0.0, 1.0))
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure_same_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Domain("correlation needs at least two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (sx * sy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub bootstrap_mean: Option<f64>,
    pub bootstrap_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueEntry {
    pub metric: String,
    pub group_a: String,
    pub group_b: String,
    pub test: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricEntry>,
    pub p_values: Vec<PValueEntry>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, boot: Option<BootstrapStats>) {
        self.metrics.push(MetricEntry {
            name: name.into(),
            value,
            bootstrap_mean: boot.map(|b| b.mean),
            bootstrap_std: boot.map(|b| b.std),
        });
    }

    pub fn get(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.p_values {
            if !(0.0..=1.0).contains(&p.p_value) {
                return Err(Error::Domain(format!("p-value {} outside [0, 1]", p.p_value)));
            }
        }
        for m in &self.metrics {
            if m.bootstrap_std.is_some_and(|s| !(s >= 0.0)) {
                return Err(Error::Domain(format!("negative bootstrap std for {}", m.name)));
            }
        }
        Ok(())
    }
}

/// Compares σ̂_tot between in-distribution and out-of-distribution groups and
/// reports its rank correlation with molecule size.
pub fn uncertainty_report(sigma: &[f64], in_dist: &[bool], sizes: &[f64]) -> Result<MetricReport> {
    ensure_same_len(sigma.len(), in_dist.len())?;
    ensure_same_len(sigma.len(), sizes.len())?;
    let inside: Vec<f64> = sigma.iter().zip(in_dist).filter(|(_, f)| **f).map(|(s, _)| *s).collect();
    let outside: Vec<f64> = sigma.iter().zip(in_dist).filter(|(_, f)| !**f).map(|(s, _)| *s).collect();
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::Empty("both in-distribution and out-of-distribution groups"));
    }
    let mut report = MetricReport::default();
    report.push("sigma_tot_mean_in", mean(&inside), None);
    report.push("sigma_tot_mean_ood", mean(&outside), None);
    report.push("sigma_tot_size_spearman", spearman(sigma, sizes)?, None);
    report.p_values.push(PValueEntry {
        metric: "sigma_tot".into(),
        group_a: "in".into(),
        group_b: "ood".into(),
        test: "mann_whitney".into(),
        p_value: mann_whitney_u(&inside, &outside)?,
    });
    Ok(report)
}

/// Column layout for CSV sample files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TableSchema {
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
}

impl TableSchema {
    pub fn check(&self, table: &SampleTable) -> Result<()> {
        let cont: Vec<&String> = table.continuous.keys().collect();
        let cat: Vec<&String> = table.categorical.keys().collect();
        let mut want_cont: Vec<&String> = self.continuous.iter().collect();
        let mut want_cat: Vec<&String> = self.categorical.iter().collect();
        want_cont.sort();
        want_cat.sort();
        if cont != want_cont || cat != want_cat {
            return Err(Error::Config("table columns do not match schema".into()));
        }
        Ok(())
    }
}
