//! Component ablations: the full model against variants without the
//! spectral transform, without prompts and without the expert mixture,
//! trained and scored under one seed and dataset.

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, lead_steps, EvalOptions};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_fft: bool,
    pub use_prompt: bool,
    pub use_moe: bool,
    pub config_hash: String,
    /// Per variable, at the first requested lead time.
    pub rmse: Vec<f64>,
    pub acc: Vec<Option<f64>>,
    pub best_epoch: usize,
}

impl AblationRow {
    pub fn mean_rmse(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / self.rmse.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub variables: Vec<String>,
    pub lead_hours: f64,
    pub rows: Vec<AblationRow>,
    /// Whether the full model's mean RMSE is at most each ablation's.
    pub full_not_worse: Vec<(String, bool)>,
    /// Whether dropping the spectral transform hurts most.
    pub fft_removal_most_harmful: bool,
}

/// The four configurations, in table order.
pub fn variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let full = ModelConfig {
        use_fft: true,
        use_prompt: true,
        use_moe: true,
        ..base.clone()
    };
    vec![
        ("full", full.clone()),
        (
            "no_fft",
            ModelConfig {
                use_fft: false,
                ..full.clone()
            },
        ),
        (
            "no_prompt",
            ModelConfig {
                use_prompt: false,
                ..full.clone()
            },
        ),
        (
            "no_moe",
            ModelConfig {
                use_moe: false,
                ..full
            },
        ),
    ]
}

pub fn run_ablation(
    data: &Dataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalOptions,
    opts: &TrainOptions,
) -> Result<AblationTable> {
    let lead = *eval
        .lead_hours
        .first()
        .ok_or_else(|| Error::invalid("no lead time"))?;
    let k = lead_steps(&[lead], data.timestep_hours)?[0];
    let mut rows = Vec::new();
    for (name, mc) in variants(base) {
        let mut o = opts.clone();
        o.out_dir = opts.out_dir.as_ref().map(|d| d.join(name));
        let out = train(data, &mc, cfg, &o)?;
        let eval_opts = EvalOptions {
            lead_hours: vec![lead],
            ..eval.clone()
        };
        let report = evaluate(Some(&out.best), data, &out.config_hash, &eval_opts)?;
        let cells = report.rows("model", k);
        rows.push(AblationRow {
            name: name.to_string(),
            use_fft: mc.use_fft,
            use_prompt: mc.use_prompt,
            use_moe: mc.use_moe,
            config_hash: out.config_hash.clone(),
            rmse: cells.iter().map(|e| e.rmse).collect(),
            acc: cells.iter().map(|e| e.acc).collect(),
            best_epoch: out.last.best_epoch,
        });
    }
    let full = rows[0].mean_rmse();
    let full_not_worse = rows[1..]
        .iter()
        .map(|r| (r.name.clone(), full <= r.mean_rmse()))
        .collect();
    let worst = rows[1..]
        .iter()
        .max_by(|a, b| a.mean_rmse().total_cmp(&b.mean_rmse()))
        .map(|r| r.name.clone());
    Ok(AblationTable {
        dataset: data.name.clone(),
        variables: data.grid.var_names.clone(),
        lead_hours: lead,
        rows,
        full_not_worse,
        fft_removal_most_harmful: worst.as_deref() == Some("no_fft"),
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,use_fft,use_prompt,use_moe,config_hash");
        for v in &self.variables {
            s.push_str(&format!(",rmse_{v}"));
        }
        for v in &self.variables {
            s.push_str(&format!(",acc_{v}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}",
                r.name, r.use_fft, r.use_prompt, r.use_moe, r.config_hash
            ));
            for x in &r.rmse {
                s.push_str(&format!(",{x}"));
            }
            for a in &r.acc {
                s.push(',');
                if let Some(a) = a {
                    s.push_str(&a.to_string());
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_distinct_variants() {
        let v = variants(&ModelConfig::default());
        let names: Vec<_> = v.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["full", "no_fft", "no_prompt", "no_moe"]);
        let t = TrainConfig::default();
        let mut hashes: Vec<_> = v.iter().map(|(_, c)| crate::train::config_hash(c, &t)).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 4);
    }
}
