//! Two-dimensional discrete Fourier transforms over variable planes.
//!
//! Conventions: the forward transform is the unnormalized sum
//! `S[k_m, k_n] = Σ x[m, n] e^{-2πi (k_m m / M + k_n n / N)}` and the inverse
//! carries the `1 / (M N)` factor. Indices are 0-based. Spectra are stored as
//! separate real and imaginary planes, laid out `(k_m, k_n)` row-major per
//! variable.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{GridField, GridSpec};
use crate::tensor::Mat;

/// Largest imaginary residue `idft2` will silently discard.
pub const RESIDUE_TOLERANCE: f64 = 1e-6;

/// Brute-force transform refuses grids with more points than this.
pub const BRUTEFORCE_MAX_POINTS: usize = 64 * 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub grid: Arc<GridSpec>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    /// Set when the spectrum came from a real field (or was symmetrized).
    pub hermitian: bool,
}

impl SpectralField {
    pub fn zeros(grid: Arc<GridSpec>) -> Self {
        let n = grid.len();
        SpectralField {
            grid,
            re: vec![0.0; n],
            im: vec![0.0; n],
            hermitian: true,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.grid.n_vars()
    }

    #[inline]
    pub fn idx(&self, v: usize, km: usize, kn: usize) -> usize {
        (v * self.grid.n_lat() + km) * self.grid.n_lon() + kn
    }

    pub fn bin(&self, v: usize, km: usize, kn: usize) -> Complex64 {
        let i = self.idx(v, km, kn);
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|x| x.is_finite())
    }

    /// `Σ |S|²` over all bins of all variables.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    /// Largest deviation from `S[k] = conj(S[-k])`.
    pub fn hermitian_defect(&self) -> f64 {
        let (m, n) = (self.grid.n_lat(), self.grid.n_lon());
        let mut worst: f64 = 0.0;
        for v in 0..self.n_vars() {
            for km in 0..m {
                for kn in 0..n {
                    let a = self.bin(v, km, kn);
                    let b = self.bin(v, (m - km) % m, (n - kn) % n).conj();
                    worst = worst.max((a - b).norm());
                }
            }
        }
        worst
    }
}

fn smallest_factor(n: usize) -> usize {
    if n % 2 == 0 {
        return 2;
    }
    let mut f = 3;
    while f * f <= n {
        if n % f == 0 {
            return f;
        }
        f += 2;
    }
    n
}

#[inline]
fn twiddle(j: usize, n: usize, sign: f64) -> Complex64 {
    let theta = sign * 2.0 * PI * (j % n) as f64 / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}

/// In-place 1-D transform, unnormalized in both directions.
///
/// Decimation in time over the smallest prime factor at each level; prime
/// lengths fall back to the direct sum.
pub fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let p = smallest_factor(n);
    if p == n {
        let input = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            *out = input
                .iter()
                .enumerate()
                .map(|(j, x)| x * twiddle(j * k, n, sign))
                .sum();
        }
        return;
    }
    let m = n / p;
    let mut subs: Vec<Vec<Complex64>> = (0..p).map(|r| (0..m).map(|k| buf[k * p + r]).collect()).collect();
    for s in &mut subs {
        fft_inplace(s, inverse);
    }
    for q in 0..p {
        for k in 0..m {
            let out = k + q * m;
            buf[out] = (0..p).map(|r| subs[r][k] * twiddle(r * out, n, sign)).sum();
        }
    }
}

/// Forward (or inverse, unnormalized) 2-D transform of one `rows x cols`
/// complex plane.
pub fn fft2_plane(plane: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    debug_assert_eq!(plane.len(), rows * cols);
    for r in 0..rows {
        fft_inplace(&mut plane[r * cols..(r + 1) * cols], inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = plane[r * cols + c];
        }
        fft_inplace(&mut col, inverse);
        for r in 0..rows {
            plane[r * cols + c] = col[r];
        }
    }
}

/// Forward transform of a real `rows x cols` plane.
pub fn dft2_plane(x: &[f64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_plane(&mut buf, rows, cols, false);
    buf
}

/// Inverse transform (with `1/(rows·cols)`) of a complex plane.
pub fn idft2_plane(s: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut buf = s.to_vec();
    fft2_plane(&mut buf, rows, cols, true);
    let inv = 1.0 / (rows * cols) as f64;
    for b in &mut buf {
        *b *= inv;
    }
    buf
}

pub fn dft2(field: &GridField) -> SpectralField {
    dft2_with(field, Exec::Sequential)
}

/// [`dft2`] with per-variable transforms fanned out according to `exec`.
pub fn dft2_with(field: &GridField, exec: Exec) -> SpectralField {
    let (m, n) = (field.n_lat(), field.n_lon());
    let planes = exec.map_range(field.n_vars(), |v| dft2_plane(field.var(v), m, n));
    let mut out = SpectralField::zeros(field.grid.clone());
    for (v, plane) in planes.iter().enumerate() {
        let base = v * m * n;
        for (i, c) in plane.iter().enumerate() {
            out.re[base + i] = c.re;
            out.im[base + i] = c.im;
        }
    }
    out
}

/// Literal evaluation of the double sum. Test oracle only.
pub fn dft2_bruteforce(field: &GridField) -> Result<SpectralField> {
    let (m, n) = (field.n_lat(), field.n_lon());
    if m * n > BRUTEFORCE_MAX_POINTS {
        return Err(Error::invalid(format!(
            "brute-force DFT refused for {m}x{n} grid (limit {BRUTEFORCE_MAX_POINTS} points)"
        )));
    }
    let mut out = SpectralField::zeros(field.grid.clone());
    for v in 0..field.n_vars() {
        for km in 0..m {
            for kn in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..m {
                    for c in 0..n {
                        let theta = -2.0 * PI * ((km * r) as f64 / m as f64 + (kn * c) as f64 / n as f64);
                        acc += field.at(v, r, c) * Complex64::new(theta.cos(), theta.sin());
                    }
                }
                let i = out.idx(v, km, kn);
                out.re[i] = acc.re;
                out.im[i] = acc.im;
            }
        }
    }
    Ok(out)
}

/// Inverse transform back to a real field. Fails if the reconstruction
/// carries an imaginary part larger than [`RESIDUE_TOLERANCE`].
pub fn idft2(spec: &SpectralField) -> Result<GridField> {
    if !spec.is_finite() {
        return Err(Error::invalid("spectrum contains non-finite values"));
    }
    let (m, n) = (spec.grid.n_lat(), spec.grid.n_lon());
    let mut values = vec![0.0; spec.grid.len()];
    let mut residue: f64 = 0.0;
    for v in 0..spec.n_vars() {
        let base = v * m * n;
        let plane: Vec<Complex64> = (0..m * n)
            .map(|i| Complex64::new(spec.re[base + i], spec.im[base + i]))
            .collect();
        let x = idft2_plane(&plane, m, n);
        for (i, c) in x.iter().enumerate() {
            values[base + i] = c.re;
            residue = residue.max(c.im.abs());
        }
    }
    if residue > RESIDUE_TOLERANCE {
        return Err(Error::SymmetryViolation {
            residue,
            tolerance: RESIDUE_TOLERANCE,
        });
    }
    GridField::new(spec.grid.clone(), values)
}

/// Imaginary residue of the inverse transform, without failing.
pub fn inverse_residue(spec: &SpectralField) -> f64 {
    let (m, n) = (spec.grid.n_lat(), spec.grid.n_lon());
    let mut residue: f64 = 0.0;
    for v in 0..spec.n_vars() {
        let base = v * m * n;
        let plane: Vec<Complex64> = (0..m * n)
            .map(|i| Complex64::new(spec.re[base + i], spec.im[base + i]))
            .collect();
        for c in idft2_plane(&plane, m, n) {
            residue = residue.max(c.im.abs());
        }
    }
    residue
}

/// Signed wavenumber of DFT index `k` on an axis of length `n`.
#[inline]
pub fn signed_index(k: usize, n: usize) -> i64 {
    if 2 * k <= n {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Flat `(k_m, k_n)` row-major indices of the retained low-frequency block:
/// bins whose signed wavenumbers satisfy `|s_m| < k_max` and `|s_n| < k_max`.
/// The set is closed under `k -> -k`.
pub fn kept_bins(rows: usize, cols: usize, k_max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for km in 0..rows {
        for kn in 0..cols {
            if signed_index(km, rows).unsigned_abs() < k_max as u64
                && signed_index(kn, cols).unsigned_abs() < k_max as u64
            {
                out.push(km * cols + kn);
            }
        }
    }
    out
}

fn check_k_max(rows: usize, cols: usize, k_max: usize) -> Result<()> {
    if k_max == 0 || 2 * k_max > rows.min(cols) {
        return Err(Error::invalid(format!(
            "k_max must lie in 1..={} for a {rows}x{cols} grid, got {k_max}",
            rows.min(cols) / 2
        )));
    }
    Ok(())
}

pub fn truncate_modes(spec: &SpectralField, k_max: usize) -> Result<SpectralField> {
    let (m, n) = (spec.grid.n_lat(), spec.grid.n_lon());
    check_k_max(m, n, k_max)?;
    let keep = kept_bins(m, n, k_max);
    let mut mask = vec![false; m * n];
    for &k in &keep {
        mask[k] = true;
    }
    let mut out = spec.clone();
    for v in 0..spec.n_vars() {
        for (i, &kept) in mask.iter().enumerate() {
            if !kept {
                out.re[v * m * n + i] = 0.0;
                out.im[v * m * n + i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Projection onto Hermitian spectra: `(S[k] + conj(S[-k])) / 2`.
pub fn hermitian_symmetrize(spec: &SpectralField) -> SpectralField {
    let (m, n) = (spec.grid.n_lat(), spec.grid.n_lon());
    let mut out = spec.clone();
    for v in 0..spec.n_vars() {
        symmetrize_plane(
            &spec.re[v * m * n..(v + 1) * m * n],
            &spec.im[v * m * n..(v + 1) * m * n],
            &mut out.re[v * m * n..(v + 1) * m * n],
            &mut out.im[v * m * n..(v + 1) * m * n],
            m,
            n,
        );
    }
    out.hermitian = true;
    out
}

fn symmetrize_plane(re: &[f64], im: &[f64], ore: &mut [f64], oim: &mut [f64], m: usize, n: usize) {
    for km in 0..m {
        for kn in 0..n {
            let i = km * n + kn;
            let j = ((m - km) % m) * n + (n - kn) % n;
            ore[i] = 0.5 * (re[i] + re[j]);
            oim[i] = 0.5 * (im[i] - im[j]);
        }
    }
}

/// Maps retained-bin coefficients `[n_kept x 2]` (re, im columns) of one
/// variable to a real `M x N` plane: scatter, Hermitian projection, inverse
/// transform, real part.
#[derive(Debug, Clone)]
pub struct SpectrumToField {
    rows: usize,
    cols: usize,
    kept: Arc<Vec<usize>>,
}

impl SpectrumToField {
    pub fn new(rows: usize, cols: usize, kept: Arc<Vec<usize>>) -> Self {
        SpectrumToField { rows, cols, kept }
    }

    fn scatter(&self, x: &Mat) -> (Vec<f64>, Vec<f64>) {
        let p = self.rows * self.cols;
        let (mut re, mut im) = (vec![0.0; p], vec![0.0; p]);
        for (r, &k) in self.kept.iter().enumerate() {
            re[k] = x.at(r, 0);
            im[k] = x.at(r, 1);
        }
        (re, im)
    }
}

impl LinearMap for SpectrumToField {
    fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.shape(), (self.kept.len(), 2), "SpectrumToField: input shape");
        let (m, n) = (self.rows, self.cols);
        let (re, im) = self.scatter(x);
        let (mut sre, mut sim) = (vec![0.0; m * n], vec![0.0; m * n]);
        symmetrize_plane(&re, &im, &mut sre, &mut sim, m, n);
        let plane: Vec<Complex64> = sre
            .iter()
            .zip(&sim)
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect();
        let out = idft2_plane(&plane, m, n);
        Mat::from_vec(m, n, out.iter().map(|c| c.re).collect())
    }

    fn adjoint(&self, g: &Mat) -> Mat {
        let (m, n) = (self.rows, self.cols);
        let spec = dft2_plane(&g.data, m, n);
        let inv = 1.0 / (m * n) as f64;
        let re: Vec<f64> = spec.iter().map(|c| c.re * inv).collect();
        let im: Vec<f64> = spec.iter().map(|c| c.im * inv).collect();
        let (mut sre, mut sim) = (vec![0.0; m * n], vec![0.0; m * n]);
        symmetrize_plane(&re, &im, &mut sre, &mut sim, m, n);
        let mut out = Mat::zeros(self.kept.len(), 2);
        for (r, &k) in self.kept.iter().enumerate() {
            out.set(r, 0, sre[k]);
            out.set(r, 1, sim[k]);
        }
        out
    }
}

/// Forward transform of a real `M x N` plane restricted to retained bins,
/// producing `[n_kept x 2]`.
#[derive(Debug, Clone)]
pub struct FieldToSpectrum {
    rows: usize,
    cols: usize,
    kept: Arc<Vec<usize>>,
}

impl FieldToSpectrum {
    pub fn new(rows: usize, cols: usize, kept: Arc<Vec<usize>>) -> Self {
        FieldToSpectrum { rows, cols, kept }
    }
}

impl LinearMap for FieldToSpectrum {
    fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.shape(), (self.rows, self.cols), "FieldToSpectrum: input shape");
        let spec = dft2_plane(&x.data, self.rows, self.cols);
        let mut out = Mat::zeros(self.kept.len(), 2);
        for (r, &k) in self.kept.iter().enumerate() {
            out.set(r, 0, spec[k].re);
            out.set(r, 1, spec[k].im);
        }
        out
    }

    fn adjoint(&self, g: &Mat) -> Mat {
        let (m, n) = (self.rows, self.cols);
        let mut plane = vec![Complex64::new(0.0, 0.0); m * n];
        for (r, &k) in self.kept.iter().enumerate() {
            plane[k] = Complex64::new(g.at(r, 0), g.at(r, 1));
        }
        fft2_plane(&mut plane, m, n, true);
        Mat::from_vec(m, n, plane.iter().map(|c| c.re).collect())
    }
}

/// Coefficient tables `A[u, v]` and `B[u, v]` for one square plane.
#[derive(Debug, Clone)]
pub struct Prop1Coefficients {
    pub n: usize,
    pub a: Vec<Complex64>,
    pub b: Vec<Complex64>,
}

/// The extension formulas reference `F(N+1, v)`, a bin that an `N`-point
/// transform does not define; the harness does not evaluate them.
pub const PROP1_AMBIGUITY_NOTE: &str = "AMBIGUITY: the extension formulas for F'(u,v) and f(N,y) reference F(N+1,v), which is undefined for an N-point DFT (indices run 0..N-1). Coefficients A and B and the DFT/iDFT round-trip identities are verified; the extension formulas are not evaluated.";

fn square_plane(field: &GridField) -> Result<(usize, &[f64])> {
    if field.n_vars() != 1 {
        return Err(Error::invalid(format!(
            "coefficient harness needs a single variable, got {}",
            field.n_vars()
        )));
    }
    if field.n_lat() != field.n_lon() {
        return Err(Error::invalid(format!(
            "coefficient harness needs a square grid, got {}x{}",
            field.n_lat(),
            field.n_lon()
        )));
    }
    Ok((field.n_lat(), field.var(0)))
}

/// `Σ_x Σ_y f(x, y) e^{-2πi (u x + v y) / period}` evaluated separably.
fn kernel_sum(f: &[f64], n: usize, u: usize, v: usize, period: usize) -> Complex64 {
    let w = |k: usize, x: usize| twiddle(k * x, period, -1.0);
    (0..n)
        .map(|x| {
            let row: Complex64 = (0..n).map(|y| f[x * n + y] * w(v, y)).sum();
            row * w(u, x)
        })
        .sum()
}

/// `(A(u, v), B(u, v))` for a single-variable square field.
pub fn prop1_coefficients(field: &GridField, u: usize, v: usize) -> Result<(Complex64, Complex64)> {
    let (n, f) = square_plane(field)?;
    let sn = kernel_sum(f, n, u, v, n);
    let sn1 = kernel_sum(f, n, u, v, n + 1);
    let a = sn / n as f64 - sn1 / (n + 1) as f64;
    let b = sn1 / ((n + 1) * (n + 1)) as f64;
    Ok((a, b))
}

pub fn prop1_table(field: &GridField) -> Result<Prop1Coefficients> {
    let (n, _) = square_plane(field)?;
    let mut a = Vec::with_capacity(n * n);
    let mut b = Vec::with_capacity(n * n);
    for u in 0..n {
        for v in 0..n {
            let (au, bu) = prop1_coefficients(field, u, v)?;
            a.push(au);
            b.push(bu);
        }
    }
    Ok(Prop1Coefficients { n, a, b })
}

/// Forward transform with the `1/N²` normalization used alongside the
/// coefficient definitions.
pub fn dft2_unit(f: &[f64], n: usize) -> Vec<Complex64> {
    let inv = 1.0 / (n * n) as f64;
    dft2_plane(f, n, n).into_iter().map(|c| c * inv).collect()
}

/// Inverse of [`dft2_unit`] (no prefactor).
pub fn idft2_unit(s: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut buf = s.to_vec();
    fft2_plane(&mut buf, n, n, true);
    buf
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Prop1Report {
    pub n: usize,
    /// `max |iDFT(DFT(f)) - f|` under the `1/N²` forward normalization.
    pub roundtrip_error: f64,
    /// `max |A - (N·F - (N+1)·B)|` over all `(u, v)`.
    pub identity_error: f64,
    pub passes: bool,
    pub note: String,
}

pub const PROP1_TOLERANCE: f64 = 1e-9;

pub fn prop1_roundtrip_check(field: &GridField) -> Result<Prop1Report> {
    let (n, f) = square_plane(field)?;
    let spec = dft2_unit(f, n);
    let back = idft2_unit(&spec, n);
    let roundtrip_error = back
        .iter()
        .zip(f)
        .map(|(c, &x)| (c - x).norm())
        .fold(0.0, f64::max);

    let table = prop1_table(field)?;
    let identity_error = (0..n * n)
        .map(|i| (table.a[i] - (spec[i] * n as f64 - table.b[i] * (n + 1) as f64)).norm())
        .fold(0.0, f64::max);

    Ok(Prop1Report {
        n,
        roundtrip_error,
        identity_error,
        passes: roundtrip_error <= PROP1_TOLERANCE && identity_error <= PROP1_TOLERANCE,
        note: PROP1_AMBIGUITY_NOTE.to_string(),
    })
}

/// Outcome of [`prop1_roundtrip_check`] over a batch of random fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Prop1Sweep {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub fields_per_size: usize,
    pub tolerance: f64,
    pub max_roundtrip_error: f64,
    pub max_identity_error: f64,
    pub passed: bool,
    pub note: String,
    pub fields: Vec<Prop1Report>,
}

/// Random single-variable `n × n` field with entries uniform in `[-1, 1)`.
pub fn random_square_field(n: usize, rng: &mut impl rand::Rng) -> Result<GridField> {
    let grid = Arc::new(GridSpec::equiangular(vec!["f".into()], n, n)?);
    let values = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    GridField::new(grid, values)
}

pub fn prop1_sweep(sizes: &[usize], fields_per_size: usize, seed: u64) -> Result<Prop1Sweep> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut fields = Vec::with_capacity(sizes.len() * fields_per_size);
    for &n in sizes {
        for _ in 0..fields_per_size {
            fields.push(prop1_roundtrip_check(&random_square_field(n, &mut rng)?)?);
        }
    }
    let max_roundtrip_error = fields.iter().map(|r| r.roundtrip_error).fold(0.0, f64::max);
    let max_identity_error = fields.iter().map(|r| r.identity_error).fold(0.0, f64::max);
    Ok(Prop1Sweep {
        seed,
        sizes: sizes.to_vec(),
        fields_per_size,
        tolerance: PROP1_TOLERANCE,
        max_roundtrip_error,
        max_identity_error,
        passed: fields.iter().all(|r| r.passes),
        note: PROP1_AMBIGUITY_NOTE.to_string(),
        fields,
    })
}
