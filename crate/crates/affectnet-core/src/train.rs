//! Two-phase training.
//!
//! Phase 1 optimizes model parameters with Adam under the plain-sum total
//! loss; phase 2 fine-tunes everything plus the per-task log-variances with
//! SGD under the uncertainty-weighted loss (log-variances reset to 0 at the
//! phase boundary, which makes the first weighted value equal
//! 0.5*L_va + L_au + L_expr — checked and logged in-run). Fixed seeds give
//! bitwise-identical runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::{DataConfig, LossMode, OptimizerKind, StopTargets, TrainConfig};
use crate::data::{batch_iter, gen_synthetic, write_labels_csv, write_predictions_csv, Dataset};
use crate::data::{LabelRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, au_mean_f1, ccc, decision_rules, expr_macro_f1};
use crate::model::{ModelOutput, MtaNet, NUM_AUS};
use crate::objectives::{
    absent_loss, au_loss, expr_loss, total_sum_loss, va_loss, weighted_loss, TaskLoss,
};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Line-delimited structured text records of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<String>,
}

impl RunLog {
    fn push(&mut self, record: String) {
        self.records.push(record);
    }

    pub fn to_text(&self) -> String {
        let mut s = self.records.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Per-task metrics over one evaluation set; a task missing from the set
/// simply yields `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SetMetrics {
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub f1_au: Option<f64>,
    pub f1_expr: Option<f64>,
    pub accuracy_expr: Option<f64>,
}

impl SetMetrics {
    /// Mean of the available column scores: (ccc_v+ccc_a)/2, AU F1, expr F1.
    pub fn score(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        if let (Some(v), Some(a)) = (self.ccc_valence, self.ccc_arousal) {
            acc += (v + a) / 2.0;
            n += 1;
        }
        if let Some(f) = self.f1_au {
            acc += f;
            n += 1;
        }
        if let Some(f) = self.f1_expr {
            acc += f;
            n += 1;
        }
        if n == 0 {
            f64::NAN
        } else {
            acc / n as f64
        }
    }

    fn fmt_field(v: Option<f64>) -> String {
        match v {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        }
    }

    pub fn meets(&self, targets: &StopTargets) -> bool {
        let va_ok = match (self.ccc_valence, self.ccc_arousal) {
            (Some(v), Some(a)) => (v + a) / 2.0 >= targets.va_ccc,
            _ => true,
        };
        let au_ok = self.f1_au.map_or(true, |f| f >= targets.au_f1);
        let expr_ok = self
            .accuracy_expr
            .map_or(true, |a| a >= targets.expr_accuracy);
        va_ok && au_ok && expr_ok
    }
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub model: MtaNet<f32>,
    pub log: RunLog,
    pub best_val_score: Option<f64>,
    pub val_metrics: Option<SetMetrics>,
    pub train_metrics: SetMetrics,
    /// |weighted - (0.5 L_va + L_au + L_expr)| at the first phase-2 step.
    pub eq5_identity_diff: Option<f64>,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward the whole set in inference mode, batched to bound memory.
fn predict_set(model: &MtaNet<f32>, data: &Dataset) -> Result<ModelOutput<f32>> {
    let mut va = Vec::with_capacity(data.len() * 2);
    let mut au = Vec::with_capacity(data.len() * NUM_AUS);
    let mut expr = Vec::with_capacity(data.len() * 7);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(64) {
        let images = data.gather_images(chunk);
        let out = model.predict(&images)?;
        va.extend_from_slice(out.va.data());
        au.extend_from_slice(out.au_logits.data());
        expr.extend_from_slice(out.expr_logits.data());
    }
    Ok(ModelOutput {
        va: Tensor::new(vec![data.len(), 2], va)?,
        au_logits: Tensor::new(vec![data.len(), NUM_AUS], au)?,
        expr_logits: Tensor::new(vec![data.len(), 7], expr)?,
    })
}

/// Set-level metrics of a model over a dataset, respecting label masks.
pub fn evaluate_set(model: &MtaNet<f32>, data: &Dataset) -> Result<SetMetrics> {
    let output = predict_set(model, data)?;
    let decisions = decision_rules(&output);
    let labels = &data.labels;

    let mut metrics = SetMetrics::default();
    let va_rows: Vec<usize> = (0..data.len()).filter(|&i| labels.mask_va[i]).collect();
    if va_rows.len() >= 2 {
        let vp: Vec<f64> = va_rows.iter().map(|&i| decisions.va[i][0]).collect();
        let vt: Vec<f64> = va_rows.iter().map(|&i| labels.va[i * 2] as f64).collect();
        let ap: Vec<f64> = va_rows.iter().map(|&i| decisions.va[i][1]).collect();
        let at: Vec<f64> = va_rows
            .iter()
            .map(|&i| labels.va[i * 2 + 1] as f64)
            .collect();
        metrics.ccc_valence = Some(ccc(&vp, &vt)?);
        metrics.ccc_arousal = Some(ccc(&ap, &at)?);
    }
    let au_rows: Vec<usize> = (0..data.len()).filter(|&i| labels.mask_au[i]).collect();
    if !au_rows.is_empty() {
        let mut pred = Vec::with_capacity(au_rows.len() * NUM_AUS);
        let mut truth = Vec::with_capacity(au_rows.len() * NUM_AUS);
        for &i in &au_rows {
            for k in 0..NUM_AUS {
                pred.push(decisions.au[i * NUM_AUS + k]);
                truth.push(labels.au[i * NUM_AUS + k] != 0.0);
            }
        }
        metrics.f1_au = Some(au_mean_f1(&pred, &truth)?.0);
    }
    let expr_rows: Vec<usize> = (0..data.len()).filter(|&i| labels.mask_expr[i]).collect();
    if !expr_rows.is_empty() {
        let pred: Vec<usize> = expr_rows.iter().map(|&i| decisions.expr[i]).collect();
        let truth: Vec<usize> = expr_rows.iter().map(|&i| labels.expr[i]).collect();
        metrics.f1_expr = Some(expr_macro_f1(&pred, &truth)?.0);
        metrics.accuracy_expr = Some(accuracy(&pred, &truth)?);
    }
    Ok(metrics)
}

/// Export a dataset's model predictions and its labels as CSV files.
pub fn export_predictions(
    model: &MtaNet<f32>,
    data: &Dataset,
    pred_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let output = predict_set(model, data)?;
    let decisions = decision_rules(&output);
    let preds: Vec<PredictionRecord> = (0..data.len())
        .map(|i| {
            let mut au_scores = [0.0f32; NUM_AUS];
            for (k, s) in au_scores.iter_mut().enumerate() {
                *s = decisions.au_scores[i * NUM_AUS + k] as f32;
            }
            PredictionRecord {
                frame_id: data.frame_ids[i].clone(),
                valence: decisions.va[i][0] as f32,
                arousal: decisions.va[i][1] as f32,
                au_scores,
                expr: decisions.expr[i],
            }
        })
        .collect();
    write_predictions_csv(pred_path, &preds)?;
    let labels: Vec<LabelRecord> = (0..data.len())
        .map(|i| LabelRecord::from_labels(&data.frame_ids[i], &data.labels, i))
        .collect();
    write_labels_csv(labels_path, &labels)
}

/// Resolve the configured data source.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.data {
        DataConfig::Synthetic(spec) => gen_synthetic(spec),
        DataConfig::Path(dir) => Dataset::load(dir),
    }
}

struct PhaseRunner<'a> {
    config: &'a TrainConfig,
    train: Dataset,
    val: Option<Dataset>,
    dropout_rng: ChaCha8Rng,
    log: RunLog,
    best_val_score: Option<f64>,
    eq5_identity_diff: Option<f64>,
    initial_total: Option<f64>,
    high_loss_epochs: usize,
    out_dir: Option<&'a Path>,
}

impl PhaseRunner<'_> {
    #[allow(clippy::too_many_lines)]
    fn run_phase(
        &mut self,
        model: &mut MtaNet<f32>,
        phase: usize,
        steps_out: &mut usize,
    ) -> Result<()> {
        let pc = if phase == 1 {
            &self.config.phase1
        } else {
            &self.config.phase2
        };
        if pc.epochs == 0 {
            return Ok(());
        }
        self.log.push(format!(
            "event phase_start phase={phase} optimizer={} lr={} weight_decay={} loss_mode={} epochs={}",
            pc.optimizer.as_str(),
            pc.lr,
            pc.weight_decay,
            pc.loss_mode.as_str(),
            pc.epochs
        ));
        if phase == 2 {
            model.loss_weights.reset(&mut model.store);
            if self.config.freeze_backbone_phase2 {
                model.store.set_trainable_by_prefix("backbone.", false);
                self.log.push("event freeze_backbone".to_string());
            }
        }

        let mut adam = match pc.optimizer {
            OptimizerKind::Adam => Some(AdamState::new(&model.store, AdamConfig::default())),
            OptimizerKind::Sgd => None,
        };
        let tasks = self.config.tasks;
        let mut first_step_of_phase = true;
        // the loss scale changes between phases (sum vs weighted)
        self.initial_total = None;
        self.high_loss_epochs = 0;

        for epoch in 0..pc.epochs {
            let shuffle = mix_seed(self.config.seed, (phase as u64) << 32 | epoch as u64);
            let batches = batch_iter(&self.train, self.config.batch_size, shuffle)?;
            let mut sums = [0.0f64; 4]; // va, au, expr, total
            let mut counts = [0usize; 4];

            for batch in &batches {
                let tape = crate::autograd::Tape::new();
                let out = model.forward(&tape, &batch.images, true, &mut self.dropout_rng)?;
                let l_va = if tasks.va {
                    va_loss(&tape, out.va, &batch.labels)?
                } else {
                    absent_loss(&tape)
                };
                let l_au = if tasks.au {
                    au_loss(&tape, out.au_logits, &batch.labels)?
                } else {
                    absent_loss(&tape)
                };
                let l_expr = if tasks.expr {
                    expr_loss(&tape, out.expr_logits, &batch.labels)?
                } else {
                    absent_loss(&tape)
                };
                let total = match pc.loss_mode {
                    LossMode::Sum => total_sum_loss(&tape, &[l_va, l_au, l_expr])?,
                    LossMode::Weighted => weighted_loss(
                        &tape,
                        &model.store,
                        &model.loss_weights,
                        &l_va,
                        &l_au,
                        &l_expr,
                    )?,
                };
                let total_value = tape.value(total).item() as f64;
                if !total_value.is_finite() {
                    self.log.push(format!(
                        "event numerical_failure phase={phase} epoch={epoch} total={total_value}"
                    ));
                    return Err(Error::NonFinite("training loss".into()));
                }

                let component = |l: &TaskLoss| {
                    l.active()
                        .then(|| tape.value(l.value).item() as f64)
                };
                let comps = [component(&l_va), component(&l_au), component(&l_expr)];
                for (i, c) in comps.iter().enumerate() {
                    if let Some(v) = c {
                        sums[i] += v;
                        counts[i] += 1;
                    }
                }
                sums[3] += total_value;
                counts[3] += 1;
                // the divergence guard compares against the pre-training loss
                self.initial_total.get_or_insert(total_value);

                if phase == 2 && first_step_of_phase && pc.loss_mode == LossMode::Weighted {
                    let expected = 0.5 * comps[0].unwrap_or(0.0)
                        + comps[1].unwrap_or(0.0)
                        + comps[2].unwrap_or(0.0);
                    let diff = (total_value - expected).abs();
                    self.eq5_identity_diff = Some(diff);
                    self.log.push(format!(
                        "event weighted_identity weighted={total_value:.9} expected={expected:.9} diff={diff:.3e}"
                    ));
                }
                first_step_of_phase = false;

                model.store.zero_grads();
                tape.backward(total)?;
                tape.write_param_grads(&mut model.store);
                match (&mut adam, pc.optimizer) {
                    (Some(state), OptimizerKind::Adam) => {
                        adam_step(&mut model.store, state, pc.lr, pc.weight_decay)?
                    }
                    _ => sgd_step(&mut model.store, pc.lr, pc.weight_decay)?,
                }
                *steps_out += 1;
            }

            let mean = |i: usize| {
                if counts[i] == 0 {
                    f64::NAN
                } else {
                    sums[i] / counts[i] as f64
                }
            };
            let (s_va, s_au, s_expr) = model.loss_weights.values(&model.store);
            if ![s_va, s_au, s_expr].iter().all(|s| s.is_finite()) {
                self.log
                    .push(format!("event numerical_failure phase={phase} epoch={epoch} loss_weights"));
                return Err(Error::NonFinite("loss weights".into()));
            }
            let val = match &self.val {
                Some(v) if !v.is_empty() => Some(evaluate_set(model, v)?),
                _ => None,
            };
            let val_txt = match &val {
                Some(m) => format!(
                    "val_ccc_v={} val_ccc_a={} val_f1_au={} val_f1_expr={} val_acc={} val_score={:.6}",
                    SetMetrics::fmt_field(m.ccc_valence),
                    SetMetrics::fmt_field(m.ccc_arousal),
                    SetMetrics::fmt_field(m.f1_au),
                    SetMetrics::fmt_field(m.f1_expr),
                    SetMetrics::fmt_field(m.accuracy_expr),
                    m.score()
                ),
                None => "val_score=-".to_string(),
            };
            self.log.push(format!(
                "epoch phase={phase} epoch={epoch} steps={} loss_va={:.6} loss_au={:.6} loss_expr={:.6} total={:.6} s_va={s_va:.6} s_au={s_au:.6} s_expr={s_expr:.6} sigma_va={:.6} sigma_au={:.6} sigma_expr={:.6} {val_txt}",
                batches.len(),
                mean(0),
                mean(1),
                mean(2),
                mean(3),
                (s_va / 2.0).exp(),
                (s_au / 2.0).exp(),
                (s_expr / 2.0).exp(),
            ));

            // checkpoint the best validation score seen so far
            if let Some(m) = &val {
                let score = m.score();
                if score.is_finite()
                    && self.best_val_score.is_none_or(|best| score > best)
                {
                    self.best_val_score = Some(score);
                    if let Some(dir) = self.out_dir {
                        save_checkpoint(model, &dir.join("best.ckpt"))?;
                        self.log
                            .push(format!("event best_checkpoint phase={phase} epoch={epoch} score={score:.6}"));
                    }
                }
            }

            // divergence guard: 10x the initial total for 3 straight epochs
            let total_mean = mean(3);
            let initial = self.initial_total.unwrap_or(total_mean);
            if total_mean > 10.0 * initial.abs().max(1e-6) {
                self.high_loss_epochs += 1;
                if self.high_loss_epochs >= 3 {
                    self.log.push(format!(
                        "event divergence_abort phase={phase} epoch={epoch} total={total_mean:.6} initial={initial:.6}"
                    ));
                    return Err(Error::NonFinite(format!(
                        "training diverged: total loss {total_mean:.3} vs initial {initial:.3} for 3 epochs"
                    )));
                }
            } else {
                self.high_loss_epochs = 0;
            }

            // optional early stop on training-set targets (phase 1)
            if phase == 1 {
                if let Some(targets) = &self.config.stop_targets {
                    let train_metrics = evaluate_set(model, &self.train)?;
                    if train_metrics.meets(targets) {
                        self.log.push(format!(
                            "event train_targets_met phase=1 epoch={epoch} steps={steps_out}",
                            steps_out = *steps_out
                        ));
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Run both phases over the dataset; write checkpoints, logs and validation
/// CSVs into `out_dir` when given.
pub fn run_training(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut model = MtaNet::<f32>::new(config.model.clone(), mix_seed(config.seed, 1))?;
    let (train_rows, val_rows) =
        dataset.split_indices(config.val_fraction, mix_seed(config.seed, 2));
    let train = dataset.subset(&train_rows);
    let val = (!val_rows.is_empty()).then(|| dataset.subset(&val_rows));

    let mut log = RunLog::default();
    for (k, v) in config.echo() {
        log.push(format!("config {k} = {v}"));
    }
    log.push(format!(
        "event split train={} val={}",
        train.len(),
        val.as_ref().map_or(0, Dataset::len)
    ));

    let mut runner = PhaseRunner {
        config,
        train,
        val,
        dropout_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3)),
        log,
        best_val_score: None,
        eq5_identity_diff: None,
        initial_total: None,
        high_loss_epochs: 0,
        out_dir,
    };

    let mut phase1_steps = 0usize;
    let mut phase2_steps = 0usize;
    runner.run_phase(&mut model, 1, &mut phase1_steps)?;
    runner.run_phase(&mut model, 2, &mut phase2_steps)?;

    let train_metrics = evaluate_set(&model, &runner.train)?;
    let val_metrics = match &runner.val {
        Some(v) => Some(evaluate_set(&model, v)?),
        None => None,
    };
    runner.log.push(format!(
        "event done phase1_steps={phase1_steps} phase2_steps={phase2_steps} train_score={:.6}",
        train_metrics.score()
    ));

    if let Some(dir) = out_dir {
        save_checkpoint(&model, &dir.join("final.ckpt"))?;
        if let Some(v) = &runner.val {
            export_predictions(
                &model,
                v,
                &dir.join("val_predictions.csv"),
                &dir.join("val_labels.csv"),
            )?;
        }
        runner.log.save(&dir.join("run.log"))?;
    }

    Ok(TrainOutcome {
        model,
        log: runner.log,
        best_val_score: runner.best_val_score,
        val_metrics,
        train_metrics,
        eq5_identity_diff: runner.eq5_identity_diff,
        phase1_steps,
        phase2_steps,
    })
}
