use std::fmt;
use std::str::FromStr;

use capt_bank::ConfusionBank;
use capt_world::World;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::pipeline::run_experiment;
use crate::report::Report;
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRow {
    pub level: f64,
    pub hm: Option<f64>,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub correction_rate: Option<f64>,
}

/// Retrains at every noise level with everything else fixed.
pub fn noise_ablation(world: &World, bank: &ConfusionBank, cfg: &TrainConfig, levels: &[f64]) -> Result<Vec<NoiseRow>> {
    levels
        .iter()
        .map(|&level| {
            let cfg = TrainConfig {
                noise_level: level,
                ..cfg.clone()
            };
            let (_, r) = run_experiment(world, bank, &cfg)?;
            Ok(NoiseRow {
                level,
                hm: r.hm,
                base_accuracy: r.base_accuracy,
                novel_accuracy: r.novel_accuracy,
                correction_rate: r.correction_rate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PairsC,
    RepsPerCategory,
    Lr,
    Tau,
    TopK,
    PMask,
    Epochs,
    AlphaS,
    NoiseLevel,
}

impl SweepParam {
    pub const ALL: [SweepParam; 9] = [
        SweepParam::PairsC,
        SweepParam::RepsPerCategory,
        SweepParam::Lr,
        SweepParam::Tau,
        SweepParam::TopK,
        SweepParam::PMask,
        SweepParam::Epochs,
        SweepParam::AlphaS,
        SweepParam::NoiseLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lr => "lr",
            SweepParam::Tau => "tau",
            SweepParam::PairsC => "pairs_c",
            SweepParam::RepsPerCategory => "reps_per_category",
            SweepParam::TopK => "top_k",
            SweepParam::PMask => "p_mask",
            SweepParam::Epochs => "epochs",
            SweepParam::AlphaS => "alpha_s",
            SweepParam::NoiseLevel => "noise_level",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(TrainError::Config(format!("{} takes whole numbers, got {value}", self.name())))
            }
        };
        let mut out = cfg.clone();
        match self {
            SweepParam::Lr => out.lr = value,
            SweepParam::Tau => out.tau = value,
            SweepParam::PairsC => out.pairs_c = count()?,
            SweepParam::RepsPerCategory => out.reps_per_category = count()?,
            SweepParam::TopK => out.top_k = count()?,
            SweepParam::PMask => out.p_mask = value,
            SweepParam::Epochs => out.epochs = count()?,
            SweepParam::AlphaS => out.alpha_s = value,
            SweepParam::NoiseLevel => out.noise_level = value,
        }
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
            TrainError::Config(format!("unknown sweep parameter {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub report: Report,
}

pub fn sweep(world: &World, bank: &ConfusionBank, cfg: &TrainConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(TrainError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let (_, report) = run_experiment(world, bank, &param.apply(cfg, value)?)?;
            Ok(SweepRow { param, value, report })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from("param,value,base,novel,hm,correction,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.param,
            r.value,
            cell(r.report.base_accuracy),
            cell(r.report.novel_accuracy),
            cell(r.report.hm),
            cell(r.report.correction_rate),
            cell(r.report.loss_curve.last().copied()),
        ));
    }
    out
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from("level,base,novel,hm,correction\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.level,
            cell(r.base_accuracy),
            cell(r.novel_accuracy),
            cell(r.hm),
            cell(r.correction_rate)
        ));
    }
    out
}
