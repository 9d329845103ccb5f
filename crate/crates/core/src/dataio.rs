//! Dataset container, the `manifest.json` + `.grd1` on-disk format, the
//! synthetic advection–diffusion generator and the two reference
//! forecasts.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec, HistoryWindow};
use crate::metrics::Climatology;
use crate::spectral::{dft2_plane, idft2_plane};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const PAYLOAD_SUFFIX: &str = ".grd1";

/// Half-open, time-ordered step ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Consecutive blocks with the given train and validation fractions;
    /// the remainder is the test split.
    pub fn by_fraction(n_steps: usize, train: f64, val: f64) -> Result<Self> {
        if !(train > 0.0) || !(val >= 0.0) || train + val >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "split fractions {train}/{val} leave no test data"
            )));
        }
        let a = (n_steps as f64 * train).round() as usize;
        let b = a + (n_steps as f64 * val).round() as usize;
        let s = Splits {
            train: 0..a,
            val: a..b.min(n_steps),
            test: b.min(n_steps)..n_steps,
        };
        s.validate(n_steps)?;
        Ok(s)
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        let ok = self.train.start == 0
            && self.train.end <= self.val.start
            && self.val.start <= self.val.end
            && self.val.end <= self.test.start
            && self.test.start <= self.test.end
            && self.test.end <= n_steps
            && !self.train.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "splits {self:?} are not ordered, disjoint ranges within {n_steps} steps"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// JSON sidecar describing a `.grd1` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub var_names: Vec<String>,
    pub n_lat: usize,
    pub n_lon: usize,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub timestep_hours: f64,
    pub start_hour: f64,
    pub n_steps: usize,
    pub splits: Splits,
    /// Payload file name, relative to the manifest.
    pub payload: String,
    /// Lowercase hex SHA-256 of the payload bytes.
    pub sha256: String,
    /// Generator settings, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
    /// Short digest of `generator`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// A gridded time series held as `f32`, time-major then variable,
/// latitude, longitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub grid: Arc<GridSpec>,
    pub timestep_hours: f64,
    pub start_hour: f64,
    pub splits: Splits,
    pub values: Vec<f32>,
    pub generator: Option<SyntheticConfig>,
}

impl Dataset {
    /// Builds a dataset from `f64` frames; values are rounded to `f32`.
    pub fn from_frames(
        name: impl Into<String>,
        frames: &[GridField],
        timestep_hours: f64,
        splits: Splits,
    ) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
        let mut values = Vec::with_capacity(frames.len() * first.values.len());
        for f in frames {
            first.check_same_shape(f)?;
            values.extend(f.values.iter().map(|&x| x as f32));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(
                "frames contain non-finite or f32-overflowing values",
            ));
        }
        splits.validate(frames.len())?;
        if !(timestep_hours > 0.0) {
            return Err(Error::invalid("timestep must be positive"));
        }
        Ok(Dataset {
            name: name.into(),
            grid: first.grid.clone(),
            timestep_hours,
            start_hour: 0.0,
            splits,
            values,
            generator: None,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.grid.len()
    }

    pub fn frame(&self, t: usize) -> GridField {
        let n = self.grid.len();
        GridField {
            grid: self.grid.clone(),
            values: self.values[t * n..(t + 1) * n]
                .iter()
                .map(|&x| x as f64)
                .collect(),
        }
    }

    pub fn hour(&self, t: usize) -> f64 {
        self.start_hour + t as f64 * self.timestep_hours
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.splits.train.clone(),
            Split::Val => self.splits.val.clone(),
            Split::Test => self.splits.test.clone(),
        }
    }

    pub fn series(&self, split: Split) -> Vec<GridField> {
        self.range(split).map(|t| self.frame(t)).collect()
    }

    /// Starts `t` such that the window `[t, t+L)` and the target
    /// `t + L + lead - 1` all lie inside `split`.
    pub fn window_starts(&self, split: Split, history_len: usize, lead_steps: usize) -> Range<usize> {
        let r = self.range(split);
        let span = history_len + lead_steps.max(1) - 1;
        let end = r.end.saturating_sub(span);
        r.start..end.max(r.start)
    }

    pub fn window(&self, t: usize, history_len: usize) -> Result<HistoryWindow> {
        if t + history_len > self.n_steps() {
            return Err(Error::invalid(format!(
                "window {t}..{} exceeds {} steps",
                t + history_len,
                self.n_steps()
            )));
        }
        HistoryWindow::new(
            (t..t + history_len).map(|i| self.frame(i)).collect(),
            (t..t + history_len).map(|i| self.hour(i)).collect(),
        )
    }

    /// History `[t, t+L)` and the state right after it.
    pub fn sample(&self, t: usize, history_len: usize) -> Result<(HistoryWindow, GridField)> {
        let w = self.window(t, history_len)?;
        if t + history_len >= self.n_steps() {
            return Err(Error::invalid("window has no target step"));
        }
        Ok((w, self.frame(t + history_len)))
    }

    fn payload_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.payload_bytes()))
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            var_names: self.grid.var_names.clone(),
            n_lat: self.grid.n_lat(),
            n_lon: self.grid.n_lon(),
            lats: self.grid.lats.clone(),
            lons: self.grid.lons.clone(),
            timestep_hours: self.timestep_hours,
            start_hour: self.start_hour,
            n_steps: self.n_steps(),
            splits: self.splits.clone(),
            payload: format!("{}{PAYLOAD_SUFFIX}", self.name),
            sha256: self.checksum(),
            generator: self.generator.clone(),
            config_hash: self.generator.as_ref().map(SyntheticConfig::config_hash),
        }
    }

    /// Writes `<name>.manifest.json` and `<name>.grd1` into `dir`; returns
    /// the manifest path. Existing files are only replaced with `overwrite`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<PathBuf> {
        let manifest = self.manifest();
        let mpath = dir.join(format!("{}{MANIFEST_SUFFIX}", self.name));
        let ppath = dir.join(&manifest.payload);
        if !overwrite && (mpath.exists() || ppath.exists()) {
            return Err(Error::invalid(format!(
                "{} already exists (pass overwrite to replace it)",
                mpath.display()
            )));
        }
        fs::create_dir_all(dir)?;
        fs::write(&ppath, self.payload_bytes())?;
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
        Ok(mpath)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path)?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::CorruptDataset(format!("manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::CorruptDataset(format!(
                "format version {} (supported: {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.lats.len() != m.n_lat || m.lons.len() != m.n_lon {
            return Err(Error::CorruptDataset(
                "coordinate arrays disagree with grid dims".into(),
            ));
        }
        let grid = GridSpec::new(m.var_names.clone(), m.lats.clone(), m.lons.clone())
            .map_err(|e| Error::CorruptDataset(e.to_string()))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&m.payload))?;
        let expected = m.n_steps * grid.len() * 4;
        if bytes.len() != expected {
            return Err(Error::CorruptDataset(format!(
                "payload has {} bytes, manifest implies {expected}",
                bytes.len()
            )));
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != m.sha256 {
            return Err(Error::CorruptDataset(format!(
                "checksum mismatch: payload {digest}, manifest {}",
                m.sha256
            )));
        }
        if let (Some(g), Some(h)) = (&m.generator, &m.config_hash) {
            if &g.config_hash() != h {
                return Err(Error::CorruptDataset(
                    "config hash does not match generator settings".into(),
                ));
            }
        }
        m.splits
            .validate(m.n_steps)
            .map_err(|e| Error::CorruptDataset(e.to_string()))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::CorruptDataset("payload holds non-finite values".into()));
        }
        Ok(Dataset {
            name: m.name,
            grid: Arc::new(grid),
            timestep_hours: m.timestep_hours,
            start_hour: m.start_hour,
            splits: m.splits,
            values,
            generator: m.generator,
        })
    }
}

/// Largest displacement, in grid cells per step, the generator accepts.
pub const MAX_COURANT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub var_names: Vec<String>,
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_steps: usize,
    pub timestep_hours: f64,
    /// Zonal and meridional displacement in cells per step.
    pub velocity: [f64; 2],
    /// Zonal displacement varies as `shear · sin(2π y / M)` with latitude.
    pub shear: f64,
    /// Relative spread of the velocity across variables.
    pub velocity_spread: f64,
    /// Per-step spectral decay `exp(-κ |k|²)`, `k` in radians per cell.
    pub diffusion: f64,
    /// Radial cutoff (integer wavenumbers) of the initial and forcing
    /// spectra.
    pub ic_max_wavenumber: f64,
    /// Per-step relaxation of the large-scale state toward zero.
    pub damping: f64,
    /// Standard deviation of the per-step large-scale stochastic forcing.
    pub forcing: f64,
    /// Standard deviation of white fine-scale observation noise.
    pub noise_amplitude: f64,
    /// Probability per step and variable of a localized extreme anomaly.
    pub extreme_rate: f64,
    pub extreme_amplitude: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            name: "synthetic".into(),
            var_names: ["t2m", "u10", "z", "t"].map(String::from).to_vec(),
            n_lat: 32,
            n_lon: 64,
            n_steps: 2000,
            timestep_hours: 6.0,
            velocity: [1.0, 0.5],
            shear: 0.0,
            velocity_spread: 0.3,
            diffusion: 0.01,
            ic_max_wavenumber: 1.5,
            damping: 0.005,
            forcing: 0.1,
            noise_amplitude: 0.02,
            extreme_rate: 0.002,
            extreme_amplitude: 3.0,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Offset and scale turning a unit-variance state into plausible physical
/// magnitudes for the named channel.
fn channel_units(name: &str) -> (f64, f64) {
    match name {
        "t2m" => (280.0, 12.0),
        "u10" => (0.0, 6.0),
        "z" => (540.0, 8.0),
        "t" => (275.0, 10.0),
        _ => (0.0, 1.0),
    }
}

impl SyntheticConfig {
    /// Displacement `(dx, dy)` of variable `v` at latitude row `m`.
    fn displacement(&self, v: usize, n_vars: usize, m: usize) -> (f64, f64) {
        let centre = (n_vars as f64 - 1.0) / 2.0;
        let f = 1.0 + self.velocity_spread * (v as f64 - centre) / n_vars.max(1) as f64;
        let y = (m as f64 + 0.5) / self.n_lat as f64;
        let dx = self.velocity[0] * f + self.shear * (2.0 * PI * y).sin();
        (dx, self.velocity[1] * f)
    }

    /// Short hex digest of the canonical JSON of these settings.
    pub fn config_hash(&self) -> String {
        crate::train::short_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.var_names.is_empty() || self.n_lat < 2 || self.n_lon < 2 {
            return bad("need at least one variable and a 2x2 grid".into());
        }
        if self.n_steps < 2 {
            return bad("n_steps must be >= 2".into());
        }
        if !(self.timestep_hours > 0.0) {
            return bad("timestep_hours must be positive".into());
        }
        if !(self.diffusion >= 0.0) {
            return bad(format!("diffusion {} must be >= 0", self.diffusion));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1)".into());
        }
        for (name, x) in [
            ("forcing", self.forcing),
            ("noise_amplitude", self.noise_amplitude),
            ("extreme_amplitude", self.extreme_amplitude),
            ("ic_max_wavenumber", self.ic_max_wavenumber),
        ] {
            if !(x >= 0.0) || !x.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.extreme_rate) {
            return bad("extreme_rate must lie in [0, 1]".into());
        }
        let c = self.var_names.len();
        for v in 0..c {
            for m in 0..self.n_lat {
                let (dx, dy) = self.displacement(v, c, m);
                if !dx.is_finite() || !dy.is_finite() || dx.abs() > MAX_COURANT || dy.abs() > MAX_COURANT {
                    return bad(format!(
                        "CFL violation: displacement ({dx:.3}, {dy:.3}) cells/step exceeds {MAX_COURANT}"
                    ));
                }
            }
        }
        Splits::by_fraction(self.n_steps, self.train_fraction, self.val_fraction)?;
        Ok(())
    }
}

/// Catmull–Rom weights for offsets -1, 0, 1, 2 at fraction `f`.
fn cubic_weights(f: f64) -> [f64; 4] {
    let (f2, f3) = (f * f, f * f * f);
    [
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    ]
}

/// Semi-Lagrangian step on a periodic plane: the new value at each point is
/// the bicubic interpolant at the departure point `(m - dy, n - dx)`.
fn advect(plane: &[f64], rows: usize, cols: usize, disp: impl Fn(usize) -> (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    let wrap = |i: i64, n: usize| i.rem_euclid(n as i64) as usize;
    for m in 0..rows {
        let (dx, dy) = disp(m);
        let y = m as f64 - dy;
        let x0 = -dx;
        let (iy, fy) = (y.floor() as i64, y - y.floor());
        let wy = cubic_weights(fy);
        let (ix, fx) = (x0.floor() as i64, x0 - x0.floor());
        let wx = cubic_weights(fx);
        for n in 0..cols {
            let mut acc = 0.0;
            for (a, wa) in wy.iter().enumerate() {
                if *wa == 0.0 {
                    continue;
                }
                let r = wrap(iy + a as i64 - 1, rows);
                for (b, wb) in wx.iter().enumerate() {
                    if *wb == 0.0 {
                        continue;
                    }
                    let c = wrap(n as i64 + ix + b as i64 - 1, cols);
                    acc += wa * wb * plane[r * cols + c];
                }
            }
            out[m * cols + n] = acc;
        }
    }
    out
}

fn diffuse(plane: &[f64], rows: usize, cols: usize, kappa: f64) -> Vec<f64> {
    let mut s = dft2_plane(plane, rows, cols);
    for km in 0..rows {
        let wm = 2.0 * PI * crate::spectral::signed_index(km, rows) as f64 / rows as f64;
        for kn in 0..cols {
            let wn = 2.0 * PI * crate::spectral::signed_index(kn, cols) as f64 / cols as f64;
            s[km * cols + kn] *= (-kappa * (wm * wm + wn * wn)).exp();
        }
    }
    idft2_plane(&s, rows, cols).iter().map(|z| z.re).collect()
}

/// Large-scale random field with expected unit variance, built from the
/// Fourier modes with `0 < |k| <= k_max`, amplitudes `∝ 1/(1+|k|²)`.
struct LowModes {
    rows: usize,
    cols: usize,
    modes: Vec<(i64, i64, f64)>,
}

impl LowModes {
    fn new(rows: usize, cols: usize, k_max: f64) -> Self {
        let mut modes = Vec::new();
        let lim = k_max.floor() as i64;
        for km in -lim..=lim {
            for kn in 0..=lim {
                let r2 = (km * km + kn * kn) as f64;
                let canonical = kn > 0 || (kn == 0 && km > 0);
                if canonical && r2 > 0.0 && r2 <= k_max * k_max {
                    modes.push((km, kn, 1.0 / (1.0 + r2)));
                }
            }
        }
        let norm = modes.iter().map(|m| m.2 * m.2).sum::<f64>().sqrt();
        for m in &mut modes {
            m.2 /= norm.max(f64::MIN_POSITIVE);
        }
        LowModes { rows, cols, modes }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for &(km, kn, w) in &self.modes {
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * w;
            let b: f64 = rng.sample::<f64, _>(StandardNormal) * w;
            for m in 0..self.rows {
                for n in 0..self.cols {
                    let ph = 2.0
                        * PI
                        * (km as f64 * m as f64 / self.rows as f64 + kn as f64 * n as f64 / self.cols as f64);
                    out[m * self.cols + n] += a * ph.cos() + b * ph.sin();
                }
            }
        }
        out
    }
}

/// Generates a dataset by advecting and diffusing large-scale random
/// fields, with stochastic large-scale forcing, fine-scale observation
/// noise and rare localized extremes. Deterministic per seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let grid = Arc::new(GridSpec::equiangular(
        cfg.var_names.clone(),
        cfg.n_lat,
        cfg.n_lon,
    )?);
    let (c, m, n) = (grid.n_vars(), cfg.n_lat, cfg.n_lon);
    let plane = m * n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let low = LowModes::new(m, n, cfg.ic_max_wavenumber);
    let mut state: Vec<Vec<f64>> = (0..c).map(|_| low.sample(&mut rng)).collect();
    let units: Vec<(f64, f64)> = cfg.var_names.iter().map(|s| channel_units(s)).collect();
    let mut values = Vec::with_capacity(cfg.n_steps * c * plane);
    let width = 1.0f64;
    for t in 0..cfg.n_steps {
        if t > 0 {
            for (v, phi) in state.iter_mut().enumerate() {
                let mut next = advect(phi, m, n, |row| cfg.displacement(v, c, row));
                if cfg.diffusion > 0.0 {
                    next = diffuse(&next, m, n, cfg.diffusion);
                }
                if cfg.damping > 0.0 {
                    next.iter_mut().for_each(|x| *x *= 1.0 - cfg.damping);
                }
                if cfg.forcing > 0.0 {
                    for (x, f) in next.iter_mut().zip(low.sample(&mut rng)) {
                        *x += cfg.forcing * f;
                    }
                }
                *phi = next;
            }
        }
        for (v, phi) in state.iter().enumerate() {
            let mut obs = phi.clone();
            if cfg.noise_amplitude > 0.0 {
                for x in &mut obs {
                    *x += cfg.noise_amplitude * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if cfg.extreme_rate > 0.0 && rng.random::<f64>() < cfg.extreme_rate {
                let (cy, cx) = (rng.random_range(0..m), rng.random_range(0..n));
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for i in 0..m {
                    for j in 0..n {
                        let dy = (i as f64 - cy as f64)
                            .abs()
                            .min(m as f64 - (i as f64 - cy as f64).abs());
                        let dx = (j as f64 - cx as f64)
                            .abs()
                            .min(n as f64 - (j as f64 - cx as f64).abs());
                        let r2 = (dx * dx + dy * dy) / (width * width);
                        obs[i * n + j] += sign * cfg.extreme_amplitude * (-0.5 * r2).exp();
                    }
                }
            }
            let (off, scale) = units[v];
            values.extend(obs.iter().map(|x| (off + scale * x) as f32));
        }
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig(
            "generator produced non-finite values".into(),
        ));
    }
    Ok(Dataset {
        name: cfg.name.clone(),
        grid,
        timestep_hours: cfg.timestep_hours,
        start_hour: 0.0,
        splits: Splits::by_fraction(cfg.n_steps, cfg.train_fraction, cfg.val_fraction)?,
        values,
        generator: Some(cfg.clone()),
    })
}

/// The last observed state.
pub fn persistence_forecast(history: &HistoryWindow) -> GridField {
    history.last().clone()
}

/// The climatological mean state.
pub fn climatology_forecast(clim: &Climatology) -> GridField {
    clim.mean.clone()
}
