//! Teacher calibration on synthetic renders.
//!
//! There are no pretrained CLIP weights available in this environment, so
//! the teacher is synthesized: both towers get seeded random weights, then
//! the two projection matrices are trained with a bidirectional InfoNCE
//! objective on rendered word images until image and text embeddings of the
//! same word agree. The towers themselves stay frozen, matching how the
//! teacher is used downstream. Dropping in real CLIP weights via the
//! configured safetensors path replaces all of this.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render_corpus, Image32, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::loss_inter;
use crate::teacher::{Teacher, TeacherConfig};
use crate::tensor_util::{l2_normalize_rows, scalar_f64};
use crate::trainer::Adam;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSpec {
    /// Seed for tower init, corpus rendering and batch order.
    pub seed: u64,
    /// Number of rendered (image, word) training pairs.
    pub corpus: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: 1500,
            epochs: 40,
            batch: 64,
            lr: 1e-3,
            tau: 0.07,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Out of 100 held-out pairs, how often the matching label scores above
    /// a mismatched one.
    pub pairwise_match_rate: f64,
    pub final_loss: f64,
}

fn synth_spec(config: &TeacherConfig, count: usize, seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::with_defaults(count, seed);
    spec.words.retain(|w| w.chars().count() <= config.max_label_len);
    spec
}

/// Tower outputs just before the projections: `ln_post(vision cls)` and
/// `ln_final(text eot)`, detached.
fn tower_features(
    teacher: &Teacher,
    samples: &[(Image32, String)],
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let mut hv = Vec::new();
    let mut ht = Vec::new();
    for chunk in samples.chunks(32) {
        let imgs: Vec<Image32> = chunk.iter().map(|(im, _)| im.clone()).collect();
        let labels: Vec<&str> = chunk.iter().map(|(_, w)| w.as_str()).collect();
        let batch = Image32::batch(&imgs, device)?;
        let vis = teacher.model().vision.forward_stages(&batch)?;
        hv.push(teacher.model().vision.ln_post.forward(&vis.cls)?.detach());
        let (_stages, _masks, cls) = teacher.encode_text_stages(&labels)?;
        ht.push(teacher.model().text.ln_final.forward(&cls)?.detach());
    }
    Ok((Tensor::cat(&hv, 0)?, Tensor::cat(&ht, 0)?))
}

/// Builds a random teacher and calibrates its projections. Returns the
/// calibrated teacher together with the held-out pairwise report.
pub fn pretrain_teacher(
    config: &TeacherConfig,
    spec: &PretrainSpec,
    device: &Device,
) -> Result<(Teacher, PretrainReport)> {
    let mut teacher = Teacher::init_random(config.clone(), spec.seed, device)?;
    let train_set = render_corpus(&synth_spec(config, spec.corpus, spec.seed))?;
    let (hv, ht) = tower_features(&teacher, &train_set, device)?;

    let named = teacher.params().named_tensors();
    let wv = Var::from_tensor(&named["vision/proj"])?;
    let wt = Var::from_tensor(&named["text/proj"])?;
    let vars = [wv.clone(), wt.clone()];
    let mut opt = Adam::new(vars.len());
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let n = train_set.len();
    let mut final_loss = f64::NAN;
    for _epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let idx = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                (chunk.len(),),
                device,
            )?;
            let ev = l2_normalize_rows(&hv.index_select(&idx, 0)?.matmul(wv.as_tensor())?)?;
            let et = l2_normalize_rows(&ht.index_select(&idx, 0)?.matmul(wt.as_tensor())?)?;
            let loss = ((loss_inter(&ev, &et, spec.tau)? + loss_inter(&et, &ev, spec.tau)?)? * 0.5)?;
            final_loss = scalar_f64(&loss)?;
            if !final_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    term: "pretrain".into(),
                    value: final_loss,
                });
            }
            let grads = loss.backward()?;
            opt.step(&vars, &grads, spec.lr, 5.0)?;
        }
    }

    let mut updates = BTreeMap::new();
    updates.insert("vision/proj".to_string(), wv.as_tensor().clone());
    updates.insert("text/proj".to_string(), wt.as_tensor().clone());
    teacher.override_tensors(&updates)?;

    let report = pairwise_report(&teacher, config, spec.seed.wrapping_add(7), final_loss, device)?;
    Ok((teacher, report))
}

/// Renders 100 fresh pairs and checks that each image embedding is closer
/// to its own label than to a random different label.
pub fn pairwise_report(
    teacher: &Teacher,
    config: &TeacherConfig,
    eval_seed: u64,
    final_loss: f64,
    device: &Device,
) -> Result<PretrainReport> {
    let eval_set = render_corpus(&synth_spec(config, 100, eval_seed))?;
    let imgs: Vec<Image32> = eval_set.iter().map(|(im, _)| im.clone()).collect();
    let labels: Vec<&str> = eval_set.iter().map(|(_, w)| w.as_str()).collect();
    let img_emb = l2_normalize_rows(&teacher.image_embedding(&Image32::batch(&imgs, device)?)?)?;
    let txt_emb = l2_normalize_rows(&teacher.text_embedding(&labels)?)?;
    let sims = img_emb.matmul(&txt_emb.t()?)?.to_vec2::<f32>()?;

    let mut rng = ChaCha20Rng::seed_from_u64(eval_seed.wrapping_add(1));
    let n = labels.len();
    let mut wins = 0usize;
    for i in 0..n {
        let j = loop {
            let j = rng.gen_range(0..n);
            if labels[j] != labels[i] {
                break j;
            }
        };
        if sims[i][i] > sims[i][j] {
            wins += 1;
        }
    }
    Ok(PretrainReport {
        pairwise_match_rate: 100.0 * wins as f64 / n as f64,
        final_loss,
    })
}

/// Calibrates and writes the weights to `config.weights_path`.
pub fn pretrain_and_save(
    config: &TeacherConfig,
    spec: &PretrainSpec,
    device: &Device,
) -> Result<PretrainReport> {
    let (teacher, report) = pretrain_teacher(config, spec, device)?;
    if let Some(dir) = config.weights_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    teacher.save(&config.weights_path)?;
    Ok(report)
}
