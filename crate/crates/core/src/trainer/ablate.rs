//! Ablation runs: distillation-term groups and consistency-loss variants.

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::error::Result;
use crate::losses::{BaseLoss, GamLossMode};
use crate::teacher::Teacher;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    /// Held-out accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean_acc: f64,
}

/// Builds a teacher for a row when its config needs one.
pub type TeacherFactory<'a> = &'a dyn Fn(&TrainConfig) -> Result<Option<Teacher>>;

fn run_row(
    name: &str,
    base: &TrainConfig,
    make_teacher: TeacherFactory,
    seeds: &[u64],
    device: &Device,
) -> Result<AblationRow> {
    let mut accuracies = Vec::with_capacity(seeds.len());
    let mut config_hash = String::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.out_dir = base.out_dir.join(format!("{name}_seed{seed}"));
        if config_hash.is_empty() {
            // Hash with the seed zeroed so all seeds of a row share a tag.
            let mut tagged = cfg.clone();
            tagged.seed = 0;
            tagged.out_dir = base.out_dir.join(name);
            config_hash = tagged.hash();
        }
        let teacher = make_teacher(&cfg)?;
        let mut trainer = Trainer::with_teacher(cfg, teacher, device)?;
        let outcome = trainer.train()?;
        accuracies.push(outcome.best_val_acc);
    }
    let mean_acc = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
    Ok(AblationRow {
        name: name.to_string(),
        config_hash,
        accuracies,
        mean_acc,
    })
}

/// Distillation-term groups: no distillation, visual terms only (encoder
/// stages 1-3), linguistic terms only (GAM plus decoder stages), and the
/// full seven-term objective.
pub fn run_table2(
    base: &TrainConfig,
    make_teacher: TeacherFactory,
    seeds: &[u64],
    device: &Device,
) -> Result<Vec<AblationRow>> {
    let rows: [(&str, [bool; 7]); 4] = [
        ("baseline", [false; 7]),
        ("visual", [true, true, true, false, false, false, false]),
        ("linguistic", [false, false, false, true, true, true, true]),
        ("full", [true; 7]),
    ];
    let mut out = Vec::with_capacity(rows.len());
    for (name, mask) in rows {
        let mut cfg = base.clone();
        cfg.loss.stage_mask = mask;
        cfg.distill_lambda = if mask.iter().any(|&m| m) { base.distill_lambda.max(1.0) } else { 0.0 };
        out.push(run_row(name, &cfg, make_teacher, seeds, device)?);
    }
    Ok(out)
}

/// Consistency-loss variants: no distillation, then L1, cosine, KL and the
/// second-order LCL, all over the full seven-term pairing.
pub fn run_table3(
    base: &TrainConfig,
    make_teacher: TeacherFactory,
    seeds: &[u64],
    device: &Device,
) -> Result<Vec<AblationRow>> {
    let rows: [(&str, Option<BaseLoss>); 5] = [
        ("none", None),
        ("l1", Some(BaseLoss::L1)),
        ("cos", Some(BaseLoss::Cos)),
        ("kl", Some(BaseLoss::Kl)),
        ("lcl", Some(BaseLoss::Lcl)),
    ];
    let mut out = Vec::with_capacity(rows.len());
    for (name, loss) in rows {
        let mut cfg = base.clone();
        match loss {
            None => {
                cfg.loss.stage_mask = [false; 7];
                cfg.distill_lambda = 0.0;
            }
            Some(base_loss) => {
                cfg.loss.stage_mask = [true; 7];
                cfg.loss.base_loss = base_loss;
                cfg.loss.gam_loss = match base_loss {
                    BaseLoss::Lcl => GamLossMode::LclBatch,
                    _ => GamLossMode::L1,
                };
                cfg.distill_lambda = base.distill_lambda.max(1.0);
            }
        }
        out.push(run_row(name, &cfg, make_teacher, seeds, device)?);
    }
    Ok(out)
}

/// Plain-text table for the CLI and run logs.
pub fn render_table(title: &str, rows: &[AblationRow]) -> String {
    let mut s = format!("{title}\n{:<12} {:<18} {:>8}  per-seed\n", "row", "config", "acc");
    for r in rows {
        let per_seed: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.2}")).collect();
        s.push_str(&format!(
            "{:<12} {:<18} {:>7.2}%  [{}]\n",
            r.name,
            r.config_hash,
            r.mean_acc,
            per_seed.join(", ")
        ));
    }
    s
}
