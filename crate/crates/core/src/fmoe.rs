//! Frequency-domain mixture of experts.
//!
//! Each spectral bin `(re, im)` is lifted to `d` latent channels, passed
//! through `E` per-bin expert MLPs, and the expert outputs are mixed with
//! softmax weights computed per radial wavenumber band from that band's
//! log-energy.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{mlp, MlpParams};
use crate::params::{Graph, ParamId, ParamStore};
use crate::spectral::{signed_index, SpectralField};
use crate::tensor::Mat;

/// Floor inside the log of band energies.
pub const ENERGY_FLOOR: f64 = 1e-12;

/// Partition of the `M x N` bins into radial wavenumber bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandLayout {
    pub rows: usize,
    pub cols: usize,
    /// `B + 1` strictly increasing radii; the last is the largest radius on
    /// the grid.
    pub boundaries: Vec<f64>,
    /// Band of every bin, `(k_m, k_n)` row-major.
    pub band_of_bin: Vec<usize>,
}

pub fn bin_radius(k: usize, rows: usize, cols: usize) -> f64 {
    let sm = signed_index(k / cols, rows) as f64;
    let sn = signed_index(k % cols, cols) as f64;
    (sm * sm + sn * sn).sqrt()
}

impl BandLayout {
    /// `n_bands` equal-width shells over the radii of the `resolved` bins;
    /// everything beyond falls into the outermost band.
    pub fn radial(rows: usize, cols: usize, n_bands: usize, resolved: &[usize]) -> Result<Self> {
        if n_bands == 0 {
            return Err(Error::InvalidConfig("need at least one band".into()));
        }
        let radii: Vec<f64> = (0..rows * cols).map(|k| bin_radius(k, rows, cols)).collect();
        let r_full = radii.iter().cloned().fold(0.0, f64::max);
        let r_res = resolved.iter().map(|&k| radii[k]).fold(0.0, f64::max);
        if n_bands > 1 && r_res <= 0.0 {
            return Err(Error::InvalidConfig(
                "multiple bands need resolved bins beyond the mean".into(),
            ));
        }
        let mut boundaries: Vec<f64> = (0..n_bands).map(|b| b as f64 * r_res / n_bands as f64).collect();
        boundaries.push(r_full.max(r_res));
        let band_of_bin = radii
            .iter()
            .map(|&r| (1..n_bands).rev().find(|&b| r >= boundaries[b]).unwrap_or(0))
            .collect();
        Ok(BandLayout {
            rows,
            cols,
            boundaries,
            band_of_bin,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Per-band `ln(mean |S|² + floor)` of one spectral plane.
    pub fn features(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        let nb = self.n_bands();
        let mut sum = vec![0.0; nb];
        let mut count = vec![0usize; nb];
        for (k, &b) in self.band_of_bin.iter().enumerate() {
            sum[b] += re[k] * re[k] + im[k] * im[k];
            count[b] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| {
                let mean = if c == 0 { 0.0 } else { s / c as f64 };
                (mean + ENERGY_FLOOR).ln()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FmoeParams {
    pub d_latent: usize,
    pub lift_w: ParamId,
    pub lift_b: ParamId,
    pub experts: Vec<MlpParams>,
    /// `[B x E]` slope of each expert logit on the band feature.
    pub gate_w: ParamId,
    /// `[B x E]`
    pub gate_b: ParamId,
    pub bands: BandLayout,
}

impl FmoeParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        d_latent: usize,
        n_experts: usize,
        bands: BandLayout,
        rng: &mut R,
    ) -> Result<Self> {
        if d_latent == 0 || n_experts == 0 {
            return Err(Error::InvalidConfig("d_latent and n_experts must be >= 1".into()));
        }
        let nb = bands.n_bands();
        let lift_w = store.add("fmoe.lift.w", Mat::xavier(2, d_latent, rng));
        let lift_b = store.add("fmoe.lift.b", Mat::zeros(1, d_latent));
        let experts = (0..n_experts)
            .map(|e| {
                MlpParams::init(
                    store,
                    &format!("fmoe.expert{e}"),
                    d_latent,
                    2 * d_latent,
                    d_latent,
                    rng,
                )
            })
            .collect();
        let gate_w = store.add("fmoe.gate.w", Mat::randn(nb, n_experts, 0.02, rng));
        let gate_b = store.add("fmoe.gate.b", Mat::randn(nb, n_experts, 0.02, rng));
        Ok(FmoeParams {
            d_latent,
            lift_w,
            lift_b,
            experts,
            gate_w,
            gate_b,
            bands,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Per-bin affine map of `(re, im)` rows `[R x 2]` to `[R x d]`.
pub fn lift(g: &mut Graph, p: &FmoeParams, bins: Var) -> Var {
    let (w, b) = (g.param(p.lift_w), g.param(p.lift_b));
    g.tape.affine(bins, w, b)
}

/// Softmax gate weights `[P·B x E]` for `P` planes given their band
/// features `[P x B]`.
pub fn gate(g: &mut Graph, p: &FmoeParams, features: &Mat) -> Var {
    let nb = p.bands.n_bands();
    assert_eq!(features.cols, nb, "gate: one feature per band");
    let band_ids: Arc<Vec<usize>> = Arc::new((0..features.rows * nb).map(|i| i % nb).collect());
    let f = g.constant(features.clone().reshaped(features.rows * nb, 1));
    let (w, b) = (g.param(p.gate_w), g.param(p.gate_b));
    let w_rows = g.tape.gather_rows(w, band_ids.clone());
    let b_rows = g.tape.gather_rows(b, band_ids);
    let logits = g.tape.mul_col(w_rows, f);
    let logits = g.tape.add(logits, b_rows);
    g.tape.softmax_rows(logits, None)
}

pub struct MoeOutput {
    pub latent: Var,
    pub gate: Option<Var>,
}

/// Latent mixture for `P` planes of `n_bins` bins each.
///
/// `bins` is `[P·n_bins x 2]`, `bin_ids[j]` is the flat grid index of the
/// `j`-th bin in every plane, and `features` is `[P x B]`. With `use_gate`
/// off only the first expert is applied.
pub fn moe_forward(
    g: &mut Graph,
    p: &FmoeParams,
    bins: Var,
    bin_ids: &[usize],
    features: &Mat,
    use_gate: bool,
) -> MoeOutput {
    let z = lift(g, p, bins);
    if !use_gate {
        return MoeOutput {
            latent: mlp(g, &p.experts[0], z),
            gate: None,
        };
    }
    let planes = features.rows;
    let nb = p.bands.n_bands();
    let weights = gate(g, p, features);
    let row_of_bin: Arc<Vec<usize>> = Arc::new(
        (0..planes)
            .flat_map(|pl| bin_ids.iter().map(move |&k| (pl, k)))
            .map(|(pl, k)| pl * nb + p.bands.band_of_bin[k])
            .collect(),
    );
    let per_bin = g.tape.gather_rows(weights, row_of_bin);
    let mut acc: Option<Var> = None;
    for (e, ex) in p.experts.iter().enumerate() {
        let y = mlp(g, ex, z);
        let w = g.tape.slice_cols(per_bin, e, 1);
        let term = g.tape.mul_col(y, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.tape.add(a, term),
        });
    }
    MoeOutput {
        latent: acc.expect("at least one expert"),
        gate: Some(weights),
    }
}

/// Latent channels for every bin of every variable of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpectrum {
    pub n_vars: usize,
    pub n_bins: usize,
    /// `[(V · M · N) x d]`, variable-major then `(k_m, k_n)` row-major.
    pub values: Mat,
    /// Band of each bin, length `M · N`.
    pub band_index: Vec<usize>,
}

fn spectrum_inputs(spec: &SpectralField, p: &FmoeParams) -> Result<(Mat, Mat)> {
    let (m, n) = (spec.grid.n_lat(), spec.grid.n_lon());
    if (m, n) != (p.bands.rows, p.bands.cols) {
        return Err(Error::shape(format!(
            "spectrum is {m}x{n}, bands laid out for {}x{}",
            p.bands.rows, p.bands.cols
        )));
    }
    if !spec.is_finite() {
        return Err(Error::invalid("spectrum contains non-finite values"));
    }
    let plane = m * n;
    let mut bins = Mat::zeros(spec.n_vars() * plane, 2);
    let mut feats = Vec::new();
    for v in 0..spec.n_vars() {
        let re = &spec.re[v * plane..(v + 1) * plane];
        let im = &spec.im[v * plane..(v + 1) * plane];
        for k in 0..plane {
            bins.set(v * plane + k, 0, re[k]);
            bins.set(v * plane + k, 1, im[k]);
        }
        feats.extend(p.bands.features(re, im));
    }
    let feats = Mat::from_vec(spec.n_vars(), p.bands.n_bands(), feats);
    Ok((bins, feats))
}

/// `Z = g(S)` for every bin.
pub fn lift_spectrum(spec: &SpectralField, store: &ParamStore, p: &FmoeParams) -> Result<LatentSpectrum> {
    let (bins, _) = spectrum_inputs(spec, p)?;
    let mut g = Graph::new(store);
    let b = g.constant(bins);
    let z = lift(&mut g, p, b);
    Ok(LatentSpectrum {
        n_vars: spec.n_vars(),
        n_bins: p.bands.band_of_bin.len(),
        values: g.value(z).clone(),
        band_index: p.bands.band_of_bin.clone(),
    })
}

/// Gate weights `[B x E]` for each variable of the spectrum.
pub fn gate_weights(spec: &SpectralField, store: &ParamStore, p: &FmoeParams) -> Result<Vec<Mat>> {
    let (_, feats) = spectrum_inputs(spec, p)?;
    let mut g = Graph::new(store);
    let w = gate(&mut g, p, &feats);
    let all = g.value(w);
    let nb = p.bands.n_bands();
    Ok((0..spec.n_vars())
        .map(|v| {
            Mat::from_vec(
                nb,
                all.cols,
                all.data[v * nb * all.cols..(v + 1) * nb * all.cols].to_vec(),
            )
        })
        .collect())
}

/// `Σ_e G_e(S) f_e(g(S))` for every bin.
pub fn moe_spectrum(spec: &SpectralField, store: &ParamStore, p: &FmoeParams) -> Result<LatentSpectrum> {
    let (bins, feats) = spectrum_inputs(spec, p)?;
    let ids: Vec<usize> = (0..p.bands.band_of_bin.len()).collect();
    let mut g = Graph::new(store);
    let b = g.constant(bins);
    let out = moe_forward(&mut g, p, b, &ids, &feats, true);
    Ok(LatentSpectrum {
        n_vars: spec.n_vars(),
        n_bins: ids.len(),
        values: g.value(out.latent).clone(),
        band_index: p.bands.band_of_bin.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu;
    use crate::grid::{GridField, GridSpec};
    use crate::spectral::{dft2, kept_bins};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spectrum(nv: usize, m: usize, n: usize, seed: u64) -> SpectralField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = (0..nv).map(|i| format!("v{i}")).collect();
        let g = Arc::new(GridSpec::equiangular(names, m, n).unwrap());
        let vals = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        dft2(&GridField::new(g, vals).unwrap())
    }

    fn setup(e: usize, d: usize, seed: u64) -> (ParamStore, FmoeParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bands = BandLayout::radial(8, 16, 4, &kept_bins(8, 16, 4)).unwrap();
        let p = FmoeParams::init(&mut store, d, e, bands, &mut rng).unwrap();
        // gate slopes large enough that weights differ visibly
        *store.get_mut(p.gate_w) = Mat::randn(4, e, 0.5, &mut rng);
        (store, p)
    }

    fn expert_oracle(store: &ParamStore, ex: &MlpParams, z: &[f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = (
            store.get(ex.w1),
            store.get(ex.b1),
            store.get(ex.w2),
            store.get(ex.b2),
        );
        let h: Vec<f64> = (0..w1.cols)
            .map(|j| gelu((0..w1.rows).map(|i| z[i] * w1.at(i, j)).sum::<f64>() + b1.data[j]))
            .collect();
        (0..w2.cols)
            .map(|j| (0..w2.rows).map(|i| h[i] * w2.at(i, j)).sum::<f64>() + b2.data[j])
            .collect()
    }

    #[test]
    fn bands_partition_grid() {
        let b = BandLayout::radial(8, 16, 4, &kept_bins(8, 16, 3)).unwrap();
        assert_eq!(b.boundaries.len(), 5);
        assert!(b.boundaries.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(b.boundaries[0], 0.0);
        assert_eq!(b.band_of_bin[0], 0);
        assert!(b.band_of_bin.iter().all(|&x| x < 4));
        let far = 4 * 16 + 8;
        assert_eq!(b.band_of_bin[far], 3);
        assert!(BandLayout::radial(8, 16, 2, &[0]).is_err());
    }

    #[test]
    fn zero_spectrum_zero_bias_lifts_to_zero() {
        let (store, p) = setup(2, 4, 1);
        let mut s = spectrum(1, 8, 16, 2);
        s.re.iter_mut().chain(s.im.iter_mut()).for_each(|x| *x = 0.0);
        let z = lift_spectrum(&s, &store, &p).unwrap();
        assert!(z.values.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_lift_copies_channels() {
        let (mut store, p) = setup(1, 2, 3);
        *store.get_mut(p.lift_w) = Mat::identity(2);
        let s = spectrum(2, 8, 16, 4);
        let z = lift_spectrum(&s, &store, &p).unwrap();
        for i in 0..s.re.len() {
            assert_eq!(z.values.at(i, 0), s.re[i]);
            assert_eq!(z.values.at(i, 1), s.im[i]);
        }
    }

    #[test]
    fn lift_matches_dense_oracle() {
        let (mut store, p) = setup(2, 5, 5);
        *store.get_mut(p.lift_b) = Mat::from_vec(1, 5, vec![0.1, -0.2, 0.3, 0.0, 1.0]);
        let s = spectrum(2, 8, 16, 6);
        let z = lift_spectrum(&s, &store, &p).unwrap();
        let (w, b) = (store.get(p.lift_w), store.get(p.lift_b));
        for i in 0..s.re.len() {
            for c in 0..5 {
                let e = s.re[i] * w.at(0, c) + s.im[i] * w.at(1, c) + b.data[c];
                assert!((z.values.at(i, c) - e).abs() <= 1e-9 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gate_rows_are_simplex() {
        let (store, p) = setup(3, 4, 7);
        for w in gate_weights(&spectrum(3, 8, 16, 8), &store, &p).unwrap() {
            for r in 0..w.rows {
                assert!(w.row(r).iter().all(|&x| x >= 0.0));
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_gate_is_uniform_and_single_expert_is_one() {
        let (mut store, p) = setup(4, 3, 9);
        *store.get_mut(p.gate_w) = Mat::zeros(4, 4);
        *store.get_mut(p.gate_b) = Mat::zeros(4, 4);
        let s = spectrum(1, 8, 16, 10);
        let w = &gate_weights(&s, &store, &p).unwrap()[0];
        assert!(w.data.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let (store1, p1) = setup(1, 3, 11);
        let w1 = &gate_weights(&s, &store1, &p1).unwrap()[0];
        assert!(w1.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn single_expert_collapses_to_mlp() {
        let (store, p) = setup(1, 3, 12);
        let s = spectrum(2, 8, 16, 13);
        let out = moe_spectrum(&s, &store, &p).unwrap();
        let z = lift_spectrum(&s, &store, &p).unwrap();
        let mut g = Graph::new(&store);
        let zv = g.constant(z.values.clone());
        let plain = mlp(&mut g, &p.experts[0], zv);
        assert_eq!(&out.values, g.value(plain));
        for i in 0..z.values.rows {
            let e = expert_oracle(&store, &p.experts[0], z.values.row(i));
            for c in 0..3 {
                assert!((out.values.at(i, c) - e[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let (mut store, p) = setup(3, 4, 14);
        *store.get_mut(p.gate_w) = Mat::zeros(4, 3);
        let mut b = Mat::filled(4, 3, -1e4);
        for r in 0..4 {
            b.set(r, 1, 0.0);
        }
        *store.get_mut(p.gate_b) = b;
        let s = spectrum(1, 8, 16, 15);
        let out = moe_spectrum(&s, &store, &p).unwrap();
        let z = lift_spectrum(&s, &store, &p).unwrap();
        for i in 0..z.values.rows {
            let e = expert_oracle(&store, &p.experts[1], z.values.row(i));
            for c in 0..4 {
                assert!((out.values.at(i, c) - e[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mixture_matches_literal_sum() {
        let (store, p) = setup(2, 4, 16);
        let s = spectrum(2, 8, 16, 17);
        let out = moe_spectrum(&s, &store, &p).unwrap();
        let z = lift_spectrum(&s, &store, &p).unwrap();
        let gates = gate_weights(&s, &store, &p).unwrap();
        let plane = 8 * 16;
        for v in 0..2 {
            for k in 0..plane {
                let i = v * plane + k;
                let band = p.bands.band_of_bin[k];
                let mut expect = [0.0; 4];
                for (e, ex) in p.experts.iter().enumerate() {
                    let y = expert_oracle(&store, ex, z.values.row(i));
                    for c in 0..4 {
                        expect[c] += gates[v].at(band, e) * y[c];
                    }
                }
                for c in 0..4 {
                    assert!((out.values.at(i, c) - expect[c]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn expert_permutation_equivariance() {
        let (store, p) = setup(3, 4, 18);
        let s = spectrum(1, 8, 16, 19);
        let base = moe_spectrum(&s, &store, &p).unwrap();

        let perm = [2usize, 0, 1];
        let mut store2 = store.clone();
        let mut p2 = p.clone();
        p2.experts = perm.iter().map(|&e| p.experts[e].clone()).collect();
        for id in [p.gate_w, p.gate_b] {
            let m = store.get(id);
            let mut permuted = m.clone();
            for r in 0..m.rows {
                for (new_e, &old_e) in perm.iter().enumerate() {
                    permuted.set(r, new_e, m.at(r, old_e));
                }
            }
            *store2.get_mut(id) = permuted;
        }
        let out = moe_spectrum(&s, &store2, &p2).unwrap();
        assert!(out.values.max_abs_diff(&base.values) <= 1e-12);
    }

    #[test]
    fn band_locality() {
        let (store, p) = setup(2, 4, 20);
        let s = spectrum(1, 8, 16, 21);
        let base = moe_spectrum(&s, &store, &p).unwrap();
        let gw = gate_weights(&s, &store, &p).unwrap();

        let target = 2;
        let mut s2 = s.clone();
        for (k, &b) in p.bands.band_of_bin.iter().enumerate() {
            if b == target {
                s2.re[k] *= 3.0;
                s2.im[k] *= 3.0;
            }
        }
        let out = moe_spectrum(&s2, &store, &p).unwrap();
        let gw2 = gate_weights(&s2, &store, &p).unwrap();
        for b in 0..4 {
            let same = gw[0].row(b) == gw2[0].row(b);
            assert_eq!(same, b != target, "band {b}");
        }
        for (k, &b) in p.bands.band_of_bin.iter().enumerate() {
            if b != target {
                assert_eq!(out.values.row(k), base.values.row(k));
            }
        }
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let (store, p) = setup(2, 4, 22);
        let s = spectrum(1, 4, 8, 23);
        assert!(matches!(lift_spectrum(&s, &store, &p), Err(Error::Shape(_))));
    }
}
