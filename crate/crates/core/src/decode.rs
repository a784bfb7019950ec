//! Common average reference, filter-bank log band-power features and a
//! two-class shrinkage LDA.
//!
//! Band-pass filters are 4th-order Butterworth designs (a 2nd-order low-pass
//! prototype moved to the band, then a prewarped bilinear transform), run as
//! two second-order sections forward and backward for zero phase. Signals
//! are extended at both ends by an odd reflection of 12 samples (three
//! times the filter order) and sections start from their steady state.
//!
//! Model files (`CLMD`): magic, `u16` version, `u32` feature count `d`,
//! `f64` shrinkage, `d` × `f64` weights, `f64` bias, then the two class
//! labels as `i32` (the one chosen when `wᵀx + b > 0` first).
//! Little-endian throughout.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;
use thiserror::Error;

use crate::protocol::Reader;

pub const MODEL_MAGIC: &[u8; 4] = b"CLMD";
pub const MODEL_FILE_VERSION: u16 = 1;
pub const FILTER_ORDER: usize = 4;
const PAD: usize = 3 * FILTER_ORDER;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("band {low}-{high} Hz reaches the Nyquist frequency {nyquist} Hz")]
    Nyquist { low: f64, high: f64, nyquist: f64 },
    #[error("invalid filter bank: {0}")]
    Bands(String),
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("model file format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Subtracts the across-channel mean from every sample. `data` is
/// `(n_samples, n_channels)`.
pub fn car(data: &Array2<f64>) -> Array2<f64> {
    let Some(mean) = data.mean_axis(Axis(1)) else {
        return data.clone();
    };
    data - &mean.insert_axis(Axis(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBankSpec {
    pub bands: Vec<(f64, f64)>,
}

impl Default for FilterBankSpec {
    /// Eight 4 Hz bands from 8 to 40 Hz.
    fn default() -> Self {
        Self {
            bands: (0..8).map(|i| (8.0 + 4.0 * i as f64, 12.0 + 4.0 * i as f64)).collect(),
        }
    }
}

impl FilterBankSpec {
    pub fn validate(&self, fs: f64) -> Result<(), ModelError> {
        if self.bands.is_empty() {
            return Err(ModelError::Bands("no bands".into()));
        }
        let nyquist = fs / 2.0;
        let mut prev_high = 0.0;
        for &(low, high) in &self.bands {
            if !(low > 0.0 && low < high) {
                return Err(ModelError::Bands(format!("bad band {low}-{high} Hz")));
            }
            if low < prev_high {
                return Err(ModelError::Bands("bands overlap or are not ascending".into()));
            }
            if high >= nyquist {
                return Err(ModelError::Nyquist { low, high, nyquist });
            }
            prev_high = high;
        }
        Ok(())
    }
}

/// One biquad, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    /// Transposed direct form II over `x` starting from state `z`.
    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let ([b0, b1, b2], [_, a1, a2]) = (self.b, self.a);
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// State for a constant unit input already in steady state.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[2] * g]
    }

    /// Complex frequency response at normalised angular frequency `w`.
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (self.a[0] + self.a[1] * z1 + self.a[2] * z2)
    }
}

/// 4th-order Butterworth band-pass as two sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    pub sections: [Sos; 2],
}

impl BandPass {
    pub fn design(low_hz: f64, high_hz: f64, fs: f64) -> Result<Self, ModelError> {
        FilterBankSpec { bands: vec![(low_hz, high_hz)] }.validate(fs)?;
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (w1, w2) = (warp(low_hz), warp(high_hz));
        let bw = w2 - w1;
        let w0sq = w1 * w2;
        // Second-order Butterworth low-pass prototype poles.
        let proto = [3.0, 5.0].map(|k: f64| Complex64::from_polar(1.0, k * PI / 4.0));
        // Low-pass to band-pass: each prototype pole yields two poles; two
        // zeros land at s = 0 and two at infinity.
        let mut poles = Vec::with_capacity(4);
        for p in proto {
            let half = p * bw / 2.0;
            let root = (half * half - w0sq).sqrt();
            poles.push(half + root);
            poles.push(half - root);
        }
        let mut gain = bw * bw;
        // Bilinear transform.
        let fs2 = 2.0 * fs;
        let mut denom = Complex64::new(1.0, 0.0);
        let digital: Vec<Complex64> = poles
            .iter()
            .map(|&p| {
                denom *= fs2 - p;
                (fs2 + p) / (fs2 - p)
            })
            .collect();
        // Zeros at 0 contribute fs2² to the numerator product.
        gain *= (Complex64::new(fs2 * fs2, 0.0) / denom).re;
        // Pair each upper-half-plane pole with its conjugate.
        let mut upper: Vec<Complex64> = digital.into_iter().filter(|p| p.im > 0.0).collect();
        if upper.len() != 2 {
            return Err(ModelError::Bands(format!("band {low_hz}-{high_hz} Hz is too narrow to design")));
        }
        upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
        let section = |p: Complex64, k: f64| Sos {
            b: [k, 0.0, -k],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        };
        Ok(Self {
            sections: [section(upper[0], gain), section(upper[1], 1.0)],
        })
    }

    pub fn response(&self, w: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// Cascaded steady-state initial conditions for a unit input.
    fn initial_states(&self) -> [[f64; 2]; 2] {
        let mut scale = 1.0;
        self.sections.map(|s| {
            let z = s.steady_state().map(|v| v * scale);
            scale *= s.dc_gain();
            z
        })
    }

    fn forward(&self, x: &mut [f64], zi: &[[f64; 2]; 2]) {
        let x0 = x[0];
        for (s, z) in self.sections.iter().zip(zi) {
            s.run(x, z.map(|v| v * x0));
        }
    }

    /// Zero-phase filtering with odd-reflection padding.
    pub fn filtfilt(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let n = x.len();
        if n == 0 {
            return Array1::zeros(0);
        }
        let pad = PAD.min(n - 1);
        let (first, last) = (x[0], x[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend(x.iter());
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
        let zi = self.initial_states();
        self.forward(&mut ext, &zi);
        ext.reverse();
        self.forward(&mut ext, &zi);
        ext.reverse();
        Array1::from_iter(ext[pad..pad + n].iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub fs: f64,
    pub spec: FilterBankSpec,
    pub filters: Vec<BandPass>,
}

impl FilterBank {
    pub fn design(fs: f64, spec: FilterBankSpec) -> Result<Self, ModelError> {
        spec.validate(fs)?;
        let filters = spec
            .bands
            .iter()
            .map(|&(l, h)| BandPass::design(l, h, fs))
            .collect::<Result<_, _>>()?;
        Ok(Self { fs, spec, filters })
    }

    pub fn n_features(&self, n_channels: usize) -> usize {
        self.filters.len() * n_channels
    }

    /// Log population variance of each band-passed channel, band-major.
    pub fn features(&self, data: &Array2<f64>) -> Array1<f64> {
        let n_ch = data.ncols();
        let mut out = Array1::zeros(self.n_features(n_ch));
        for (b, filter) in self.filters.iter().enumerate() {
            for (c, column) in data.columns().into_iter().enumerate() {
                let y = filter.filtfilt(column);
                let var = y.var(0.0);
                out[b * n_ch + c] = var.max(f64::MIN_POSITIVE).ln();
            }
        }
        out
    }
}

/// Band-power features of one epoch (no re-referencing).
pub fn bandpower_features(data: &Array2<f64>, fs: f64, spec: &FilterBankSpec) -> Result<Array1<f64>, ModelError> {
    Ok(FilterBank::design(fs, spec.clone())?.features(data))
}

/// CAR followed by band-power features, as one epoch function.
pub fn car_bandpower(bank: &FilterBank, data: &Array2<f64>) -> Array1<f64> {
    bank.features(&car(data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub w: Array1<f64>,
    pub b: f64,
    pub lambda: f64,
    /// `classes[0]` is predicted when `wᵀx + b > 0`.
    pub classes: [i32; 2],
}

/// Fits a two-class LDA with shrinkage `lambda` (default
/// `1e−3 · trace(Σ) / d`). `x` has one row per observation.
pub fn lda_fit(x: &Array2<f64>, labels: &[i32], lambda: Option<f64>) -> Result<LdaModel, ModelError> {
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(ModelError::Degenerate(format!("{n} rows but {} labels", labels.len())));
    }
    if d == 0 {
        return Err(ModelError::Degenerate("no features".into()));
    }
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != 2 {
        return Err(ModelError::Degenerate(format!("need exactly two classes, got {}", classes.len())));
    }
    let rows = |c: i32| -> Vec<usize> { (0..n).filter(|&i| labels[i] == c).collect() };
    let (r1, r2) = (rows(classes[0]), rows(classes[1]));
    if r1.len() < 2 || r2.len() < 2 {
        return Err(ModelError::Degenerate("each class needs at least two observations".into()));
    }
    let mean = |r: &[usize]| x.select(Axis(0), r).mean_axis(Axis(0)).unwrap();
    let (m1, m2) = (mean(&r1), mean(&r2));
    let mut scatter = Array2::<f64>::zeros((d, d));
    for (r, m) in [(&r1, &m1), (&r2, &m2)] {
        let centered = &x.select(Axis(0), r) - m;
        scatter += &centered.t().dot(&centered);
    }
    let sigma = scatter / (n - 2) as f64;
    let lambda = lambda.unwrap_or_else(|| 1e-3 * sigma.diag().sum() / d as f64);
    let mut reg = DMatrix::from_fn(d, d, |i, j| sigma[[i, j]]);
    for i in 0..d {
        reg[(i, i)] += lambda;
    }
    let diff = DVector::from_iterator(d, (&m1 - &m2).iter().copied());
    let w = match reg.clone().cholesky() {
        Some(ch) => ch.solve(&diff),
        None => reg
            .lu()
            .solve(&diff)
            .ok_or_else(|| ModelError::Degenerate("singular covariance".into()))?,
    };
    let w = Array1::from_iter(w.iter().copied());
    let b = -w.dot(&(&m1 + &m2)) / 2.0;
    Ok(LdaModel { w, b, lambda, classes: [classes[0], classes[1]] })
}

impl LdaModel {
    pub fn dims(&self) -> usize {
        self.w.len()
    }

    pub fn decision(&self, x: ArrayView1<f64>) -> Result<f64, ModelError> {
        if x.len() != self.dims() {
            return Err(ModelError::Dimension { expected: self.dims(), got: x.len() });
        }
        Ok(self.w.dot(&x) + self.b)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<i32, ModelError> {
        Ok(if self.decision(x)? > 0.0 { self.classes[0] } else { self.classes[1] })
    }

    pub fn predict_rows(&self, x: &Array2<f64>) -> Result<Vec<i32>, ModelError> {
        x.rows().into_iter().map(|r| self.predict(r)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 4 + 8 * (self.dims() + 2) + 8);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims() as u32).to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for v in &self.w {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.b.to_le_bytes());
        for c in self.classes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fmt = |e: crate::protocol::DecodeError| ModelError::Format(e.to_string());
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(fmt)? != MODEL_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = r.u16().map_err(fmt)?;
        if version != MODEL_FILE_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let d = r.u32().map_err(fmt)? as usize;
        let lambda = r.f64().map_err(fmt)?;
        if r.remaining() != d.saturating_mul(8).saturating_add(16) {
            return Err(ModelError::Format("length does not match dimension".into()));
        }
        let w = (0..d).map(|_| r.f64()).collect::<Result<Array1<f64>, _>>().map_err(fmt)?;
        let b = r.f64().map_err(fmt)?;
        let classes = [r.i32().map_err(fmt)?, r.i32().map_err(fmt)?];
        r.finish().map_err(fmt)?;
        Ok(Self { w, b, lambda, classes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Mean accuracy of `k`-fold cross-validation with contiguous folds over
/// rows in the given order.
pub fn kfold_accuracy(x: &Array2<f64>, labels: &[i32], k: usize) -> Result<f64, ModelError> {
    let n = x.nrows();
    if k < 2 || k > n {
        return Err(ModelError::Degenerate(format!("cannot split {n} rows into {k} folds")));
    }
    let mut correct = 0usize;
    for fold in 0..k {
        let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
        let train: Vec<usize> = (0..n).filter(|i| !(lo..hi).contains(i)).collect();
        let y_train: Vec<i32> = train.iter().map(|&i| labels[i]).collect();
        let model = lda_fit(&x.select(Axis(0), &train), &y_train, None)?;
        for i in lo..hi {
            correct += (model.predict(x.row(i))? == labels[i]) as usize;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn car_zeroes_row_means() {
        assert!(car(&Array2::from_elem((5, 4), 3.0)).iter().all(|&v| v == 0.0));
        assert!(car(&array![[1.0], [2.0]]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_bank_shape() {
        let spec = FilterBankSpec::default();
        assert_eq!(spec.bands.len(), 8);
        assert_eq!(spec.bands[7], (36.0, 40.0));
        let bank = FilterBank::design(200.0, spec).unwrap();
        assert_eq!(bank.features(&Array2::from_elem((200, 8), 1.0)).len(), 64);
    }

    #[test]
    fn nyquist_is_rejected() {
        let err = BandPass::design(90.0, 100.0, 200.0).unwrap_err();
        assert!(matches!(err, ModelError::Nyquist { .. }));
        assert!(FilterBankSpec { bands: vec![(8.0, 12.0), (10.0, 14.0)] }.validate(200.0).is_err());
    }

    #[test]
    fn butterworth_edges_are_half_power() {
        let fs = 200.0;
        for (l, h) in FilterBankSpec::default().bands {
            let f = BandPass::design(l, h, fs).unwrap();
            let at = |hz: f64| f.response(2.0 * PI * hz / fs).norm();
            // Prewarping puts the -3 dB points exactly on the band edges.
            assert_abs_diff_eq!(at(l), 1.0 / 2f64.sqrt(), epsilon = 1e-9);
            assert_abs_diff_eq!(at(h), 1.0 / 2f64.sqrt(), epsilon = 1e-9);
            let center = (fs / PI) * ((PI * l / fs).tan() * (PI * h / fs).tan()).sqrt().atan();
            assert_abs_diff_eq!(at(center), 1.0, epsilon = 1e-9);
            assert!(at(0.0) < 1e-12);
        }
    }

    #[test]
    fn filtfilt_of_constant_is_zero() {
        let f = BandPass::design(8.0, 12.0, 200.0).unwrap();
        let y = f.filtfilt(Array1::from_elem(100, 5.0).view());
        assert!(y.iter().all(|v| v.abs() < 1e-9), "{y:?}");
    }

    #[test]
    fn one_dimensional_threshold_is_midpoint() {
        let x = array![[0.0], [2.0], [4.0], [6.0]];
        let m = lda_fit(&x, &[1, 1, 2, 2], None).unwrap();
        let threshold = -m.b / m.w[0];
        assert_abs_diff_eq!(threshold, 3.0, epsilon = 1e-6);
        assert_eq!(m.predict(array![2.9].view()).unwrap(), 1);
        assert_eq!(m.predict(array![3.1].view()).unwrap(), 2);
    }

    #[test]
    fn degenerate_inputs() {
        let x = array![[0.0], [1.0], [2.0]];
        assert!(matches!(lda_fit(&x, &[1, 1, 1], None), Err(ModelError::Degenerate(_))));
        assert!(matches!(lda_fit(&x, &[1, 1, 2], None), Err(ModelError::Degenerate(_))));
        let m = lda_fit(&array![[0.0], [1.0], [5.0], [6.0]], &[1, 1, 2, 2], None).unwrap();
        assert!(matches!(m.predict(array![1.0, 2.0].view()), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = LdaModel { w: array![1.5, -2.0, 0.25], b: 0.125, lambda: 1e-3, classes: [1, 2] };
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"CLMD");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 8 + 24 + 8 + 8);
        assert_eq!(LdaModel::from_bytes(&bytes).unwrap(), m);
        assert!(LdaModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
