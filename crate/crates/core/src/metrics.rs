//! Latitude-weighted RMSE, anomaly correlation and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::dataio::{persistence_forecast, Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::GridField;
use crate::model::Model;
use crate::train::{latitude_weights, weighted_rmse_with, LatWeights, LossVariant};

/// Anomaly norms at or below this fraction of the field's own norm count
/// as zero.
pub const ACC_ZERO_TOLERANCE: f64 = 1e-9;

/// Pointwise time mean of a reference series.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub mean: GridField,
}

pub fn climatology(series: &[GridField]) -> Result<Climatology> {
    let first = series.first().ok_or_else(|| Error::invalid("empty series"))?;
    let mut mean = GridField::zeros(first.grid.clone());
    for f in series {
        first.check_same_shape(f)?;
        for (m, x) in mean.values.iter_mut().zip(&f.values) {
            *m += x;
        }
    }
    let inv = 1.0 / series.len() as f64;
    mean.values.iter_mut().for_each(|m| *m *= inv);
    Ok(Climatology { mean })
}

/// Per-variable RMSE with mean-one latitude weights.
pub fn eval_rmse(pred: &GridField, truth: &GridField, w: &LatWeights) -> Result<Vec<f64>> {
    weighted_rmse_with(pred, truth, w, LossVariant::WeatherbenchNormalized)
}

/// Weighted anomaly correlation of variable `v`.
pub fn eval_acc(
    pred: &GridField,
    truth: &GridField,
    clim: &Climatology,
    w: &LatWeights,
    v: usize,
) -> Result<f64> {
    pred.check_same_shape(truth)?;
    pred.check_same_shape(&clim.mean)?;
    if w.len() != pred.n_lat() {
        return Err(Error::shape("latitude weights do not match grid"));
    }
    if v >= pred.n_vars() {
        return Err(Error::shape(format!("variable {v} out of range")));
    }
    let l = w.mean_one();
    let n = pred.n_lon();
    let (p, t, c) = (pred.var(v), truth.var(v), clim.mean.var(v));
    let (mut pt, mut pp, mut tt, mut praw, mut traw) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let lm = l[i / n];
        let (ap, at) = (p[i] - c[i], t[i] - c[i]);
        pt += lm * ap * at;
        pp += lm * ap * ap;
        tt += lm * at * at;
        praw += lm * p[i] * p[i];
        traw += lm * t[i] * t[i];
    }
    let tol = ACC_ZERO_TOLERANCE * ACC_ZERO_TOLERANCE;
    if pp <= tol * praw.max(f64::MIN_POSITIVE) {
        return Err(Error::UndefinedAcc("predicted"));
    }
    if tt <= tol * traw.max(f64::MIN_POSITIVE) {
        return Err(Error::UndefinedAcc("true"));
    }
    Ok((pt / (pp * tt).sqrt()).clamp(-1.0, 1.0))
}

/// ACC for every variable; undefined values become `None`.
pub fn eval_acc_all(
    pred: &GridField,
    truth: &GridField,
    clim: &Climatology,
    w: &LatWeights,
) -> Result<Vec<Option<f64>>> {
    (0..pred.n_vars())
        .map(|v| match eval_acc(pred, truth, clim, w, v) {
            Ok(a) => Ok(Some(a)),
            Err(Error::UndefinedAcc(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    /// `model`, `persistence` or `climatology`.
    pub forecaster: String,
    pub variable: String,
    pub lead_hours: f64,
    pub lead_steps: usize,
    /// Mean over windows of the mean-one weighted RMSE.
    pub rmse: f64,
    /// Same with the literal `Σα = 1`, `1/(MN)` normalization.
    pub rmse_unit_sum: f64,
    /// Mean over windows where the ACC is defined; `None` if it never is.
    pub acc: Option<f64>,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_checksum: String,
    pub model_id: String,
    pub metric_variant: String,
    pub split: Split,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn get(&self, forecaster: &str, variable: &str, lead_steps: usize) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.forecaster == forecaster && e.variable == variable && e.lead_steps == lead_steps)
    }

    /// Entries of one forecaster at one lead, in variable order.
    pub fn rows(&self, forecaster: &str, lead_steps: usize) -> Vec<&EvalEntry> {
        self.entries
            .iter()
            .filter(|e| e.forecaster == forecaster && e.lead_steps == lead_steps)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("model_id,forecaster,variable,lead_hours,lead_steps,rmse,rmse_unit_sum,acc,n_windows\n");
        for e in &self.entries {
            let acc = e.acc.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.model_id,
                e.forecaster,
                e.variable,
                e.lead_hours,
                e.lead_steps,
                e.rmse,
                e.rmse_unit_sum,
                acc,
                e.n_windows
            ));
        }
        s
    }
}

pub const METRIC_VARIANT: &str =
    "rmse: mean-one cos-latitude weights; rmse_unit_sum: weights summing to one with 1/(MN); acc: mean-one weights";

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub lead_hours: Vec<f64>,
    pub split: Split,
    /// Use at most this many evaluation windows (evenly spaced).
    pub max_windows: Option<usize>,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            lead_hours: vec![6.0],
            split: Split::Test,
            max_windows: None,
            exec: Exec::default(),
        }
    }
}

/// Converts lead times to step counts, rejecting non-multiples.
pub fn lead_steps(lead_hours: &[f64], timestep_hours: f64) -> Result<Vec<usize>> {
    lead_hours
        .iter()
        .map(|&h| {
            let k = h / timestep_hours;
            if !(h > 0.0) || (k - k.round()).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "lead time {h} h is not a positive multiple of the {timestep_hours} h timestep"
                )));
            }
            Ok(k.round() as usize)
        })
        .collect()
}

struct Acc {
    rmse: f64,
    rmse14: f64,
    acc: f64,
    acc_n: usize,
}

/// Scores the model (when given), persistence and climatology at each
/// lead time over the windows of `opts.split`. Climatology comes from the
/// training split. The model is rolled out autoregressively.
pub fn evaluate(
    model: Option<&Model>,
    data: &Dataset,
    model_id: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let leads = lead_steps(&opts.lead_hours, data.timestep_hours)?;
    let max_lead = *leads
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("no lead times"))?;
    let history_len = model.map(|m| m.config.history_len).unwrap_or(1);
    let clim = climatology(&data.series(Split::Train))?;
    let w = latitude_weights(&data.grid.lats)?;
    let mut starts: Vec<usize> = data.window_starts(opts.split, history_len, max_lead).collect();
    if starts.is_empty() {
        return Err(Error::invalid(format!(
            "{:?} split too short for history {history_len} and lead {max_lead}",
            opts.split
        )));
    }
    if let Some(k) = opts.max_windows {
        if k > 0 && k < starts.len() {
            let n = starts.len();
            starts = (0..k).map(|i| starts[i * n / k]).collect();
        }
    }
    let c = data.grid.n_vars();
    let names: Vec<&str> = if model.is_some() {
        vec!["model", "persistence", "climatology"]
    } else {
        vec!["persistence", "climatology"]
    };

    // per window: [forecaster][lead][variable] -> (rmse, rmse14, acc)
    type Cell = (f64, f64, Option<f64>);
    let per_window = opts.exec.map(&starts, |&t| -> Result<Vec<Vec<Vec<Cell>>>> {
        let history = data.window(t, history_len)?;
        let truths: Vec<GridField> = leads
            .iter()
            .map(|&k| data.frame(t + history_len + k - 1))
            .collect();
        let mut out = Vec::new();
        for name in &names {
            let preds: Vec<GridField> = match *name {
                "model" => {
                    let m = model.expect("model present");
                    let roll = m.rollout(&history, max_lead, data.timestep_hours)?;
                    leads.iter().map(|&k| roll[k - 1].clone()).collect()
                }
                "persistence" => leads.iter().map(|_| persistence_forecast(&history)).collect(),
                _ => leads.iter().map(|_| clim.mean.clone()).collect(),
            };
            let mut rows = Vec::new();
            for (p, truth) in preds.iter().zip(&truths) {
                let r = eval_rmse(p, truth, &w)?;
                let r14 = weighted_rmse_with(p, truth, &w, LossVariant::UnitSum)?;
                let a = eval_acc_all(p, truth, &clim, &w)?;
                rows.push((0..c).map(|v| (r[v], r14[v], a[v])).collect());
            }
            out.push(rows);
        }
        Ok(out)
    });
    let mut sums: Vec<Vec<Vec<Acc>>> = names
        .iter()
        .map(|_| {
            leads
                .iter()
                .map(|_| {
                    (0..c)
                        .map(|_| Acc {
                            rmse: 0.0,
                            rmse14: 0.0,
                            acc: 0.0,
                            acc_n: 0,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    for wres in per_window {
        let wres = wres?;
        for (f, leads_res) in wres.iter().enumerate() {
            for (li, vars) in leads_res.iter().enumerate() {
                for (v, &(r, r14, a)) in vars.iter().enumerate() {
                    let s = &mut sums[f][li][v];
                    s.rmse += r;
                    s.rmse14 += r14;
                    if let Some(a) = a {
                        s.acc += a;
                        s.acc_n += 1;
                    }
                }
            }
        }
    }
    let nw = starts.len();
    let mut entries = Vec::new();
    for (f, name) in names.iter().enumerate() {
        for (li, &k) in leads.iter().enumerate() {
            for v in 0..c {
                let s = &sums[f][li][v];
                entries.push(EvalEntry {
                    forecaster: name.to_string(),
                    variable: data.grid.var_names[v].clone(),
                    lead_hours: k as f64 * data.timestep_hours,
                    lead_steps: k,
                    rmse: s.rmse / nw as f64,
                    rmse_unit_sum: s.rmse14 / nw as f64,
                    acc: (s.acc_n > 0).then(|| s.acc / s.acc_n as f64),
                    n_windows: nw,
                });
            }
        }
    }
    Ok(EvalReport {
        dataset: data.name.clone(),
        dataset_checksum: data.checksum(),
        model_id: model_id.to_string(),
        metric_variant: METRIC_VARIANT.to_string(),
        split: opts.split,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid() -> Arc<GridSpec> {
        Arc::new(GridSpec::equiangular(vec!["a".into(), "b".into()], 4, 6).unwrap())
    }

    fn random(seed: u64) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid();
        let v = (0..g.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        GridField::new(g, v).unwrap()
    }

    #[test]
    fn climatology_cases() {
        assert!(climatology(&[]).is_err());
        let c = climatology(&vec![GridField::filled(grid(), 2.5); 3]).unwrap();
        assert!(c.mean.values.iter().all(|&x| x == 2.5));
        let x = random(1);
        let neg = GridField::new(x.grid.clone(), x.values.iter().map(|v| -v).collect()).unwrap();
        assert!(climatology(&[x.clone(), neg])
            .unwrap()
            .mean
            .values
            .iter()
            .all(|&v| v == 0.0));
        let s = [random(2), random(3), random(4)];
        let c = climatology(&s).unwrap();
        for i in 0..x.values.len() {
            let e = (s[0].values[i] + s[1].values[i] + s[2].values[i]) / 3.0;
            assert!((c.mean.values[i] - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn acc_identities() {
        let w = latitude_weights(&grid().lats).unwrap();
        let clim = Climatology { mean: random(5) };
        let x = random(6);
        let anom = |s: f64| {
            let v = x
                .values
                .iter()
                .zip(&clim.mean.values)
                .map(|(a, c)| c + s * (a - c))
                .collect();
            GridField::new(x.grid.clone(), v).unwrap()
        };
        for v in 0..2 {
            assert!((eval_acc(&x, &x, &clim, &w, v).unwrap() - 1.0).abs() <= 1e-9);
            assert!((eval_acc(&anom(-1.0), &x, &clim, &w, v).unwrap() + 1.0).abs() <= 1e-9);
            assert!((eval_acc(&anom(2.0), &x, &clim, &w, v).unwrap() - 1.0).abs() <= 1e-9);
        }
        assert!(matches!(
            eval_acc(&clim.mean, &x, &clim, &w, 0),
            Err(Error::UndefinedAcc("predicted"))
        ));
        assert_eq!(eval_acc_all(&clim.mean, &x, &clim, &w).unwrap(), vec![None, None]);
    }

    #[test]
    fn rmse_translation_invariance() {
        let w = latitude_weights(&grid().lats).unwrap();
        let (a, b) = (random(7), random(8));
        let shift = |f: &GridField| {
            GridField::new(f.grid.clone(), f.values.iter().map(|x| x + 100.0).collect()).unwrap()
        };
        let r0 = eval_rmse(&a, &b, &w).unwrap();
        let r1 = eval_rmse(&shift(&a), &shift(&b), &w).unwrap();
        for (x, y) in r0.iter().zip(&r1) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn lead_time_validation() {
        assert_eq!(lead_steps(&[6.0, 36.0], 6.0).unwrap(), vec![1, 6]);
        assert!(lead_steps(&[9.0], 6.0).is_err());
        assert!(lead_steps(&[0.0], 6.0).is_err());
    }
}
