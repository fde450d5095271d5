//! Gradient computation over the full pipeline, the Adam optimizer,
//! finite-difference verification, and the desk-scale training loop.

use crate::engine::{EagerEngine, Engine};
use crate::gnn::{bind_params, GnnInputs, ModelParams, PriorPack};
use crate::losses::GroundTruth;
use crate::mat::{kernels, Mat};
use crate::metrics::score_matches;
use crate::pipeline::{
    self, build_prior_pack, LossKind, MatchSettings, MotionPrior, PairInput, PipelineError,
};
use crate::synth::{synth_scene, SynthOptions, SynthPair};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("training requires a non-empty dataset")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("gradient set has {got} tensors, parameters have {want}")]
    GradientCount { got: usize, want: usize },
    #[error("tensor {name} gradient is {got:?}, parameter is {want:?}")]
    GradientShape { name: String, got: (usize, usize), want: (usize, usize) },
}

/// Gradients aligned with [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub tensors: Vec<(String, Mat)>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            tensors: params
                .tensors()
                .into_iter()
                .map(|(name, m)| (name, Mat::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// One precomputed training example.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub a: GnnInputs,
    pub b: GnnInputs,
    pub priors: Option<PriorPack>,
    pub gt: GroundTruth,
}

/// Hyperparameters of one gradient/loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub kind: LossKind,
    pub margin: f64,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_temperature: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings { kind: LossKind::Projection, margin: 10.0, sinkhorn_iterations: 100, sinkhorn_temperature: 1.0 }
    }
}

/// Mean loss over a batch.
pub fn batch_loss(params: &ModelParams, batch: &[&TrainingPair], settings: &LossSettings) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in batch {
        let mut e = EagerEngine;
        let bound = bind_params(params, |m| m.clone());
        let loss = pipeline::pair_loss_engine(
            &mut e,
            &bound,
            &pair.a,
            &pair.b,
            pair.priors.as_ref(),
            &pair.gt,
            settings.kind,
            settings.margin,
            settings.sinkhorn_iterations,
            settings.sinkhorn_temperature,
        )?;
        total += loss.item();
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(PipelineError::NonFiniteLoss.into());
    }
    Ok(mean)
}

/// Mean loss and its gradient w.r.t. every learnable tensor, by
/// differentiating through the unrolled pipeline per pair and averaging.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[&TrainingPair],
    settings: &LossSettings,
) -> Result<(f64, GradientSet), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let bound = bind_params(params, |m| {
            let var = tape.leaf(m.clone());
            leaves.push(var);
            var
        });
        let loss = pipeline::pair_loss_engine(
            &mut tape,
            &bound,
            &pair.a,
            &pair.b,
            pair.priors.as_ref(),
            &pair.gt,
            settings.kind,
            settings.margin,
            settings.sinkhorn_iterations,
            settings.sinkhorn_temperature,
        )?;
        let value = tape.value(&loss).item();
        if !value.is_finite() {
            return Err(PipelineError::NonFiniteLoss.into());
        }
        total += value;
        let pair_grads = tape.backward(loss);
        for (slot, var) in grads.tensors.iter_mut().zip(&leaves) {
            let g = pair_grads.get(*var, &slot.1);
            let scaled = kernels::scale_const(&g, scale);
            slot.1 = kernels::add(&slot.1, &scaled);
        }
    }
    Ok((total * scale, grads))
}

/// Adam optimizer state; moment buffers align with the parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Mat>,
    second_moment: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<Mat> = params.tensors().iter().map(|(_, m)| Mat::zeros(m.rows(), m.cols())).collect();
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
) -> Result<(), TrainError> {
    let tensors = params.tensors_mut();
    if grads.tensors.len() != tensors.len() {
        return Err(TrainError::GradientCount { got: grads.tensors.len(), want: tensors.len() });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, (name, tensor)) in tensors.into_iter().enumerate() {
        let (gname, grad) = &grads.tensors[idx];
        debug_assert_eq!(&name, gname);
        if grad.shape() != tensor.shape() {
            return Err(TrainError::GradientShape { name, got: grad.shape(), want: tensor.shape() });
        }
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        for k in 0..tensor.len() {
            let g = grad.as_slice()[k];
            let ms = &mut m.as_mut_slice()[k];
            *ms = state.beta1 * *ms + (1.0 - state.beta1) * g;
            let vs = &mut v.as_mut_slice()[k];
            *vs = state.beta2 * *vs + (1.0 - state.beta2) * g * g;
            let m_hat = *ms / bc1;
            let v_hat = *vs / bc2;
            tensor.as_mut_slice()[k] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Training loop configuration.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub loss: LossSettings,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Confidence threshold for the validation F1 report.
    pub confidence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSettings::default(),
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 300,
            patience: 20,
            val_fraction: 0.2,
            confidence_threshold: 0.2,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

/// Validation F1 from eager matching against the stored ground truth.
fn validation_f1(params: &ModelParams, pairs: &[&TrainingPair], settings: &LossSettings, confidence: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let match_settings = MatchSettings {
        sinkhorn_iterations: settings.sinkhorn_iterations,
        sinkhorn_temperature: settings.sinkhorn_temperature,
        confidence_threshold: confidence,
    };
    let mut total = 0.0;
    for pair in pairs {
        let mut e = EagerEngine;
        let bound = bind_params(params, |m| m.clone());
        let Ok((fa, fb)) = crate::gnn::forward_engine(&mut e, &bound, &pair.a, &pair.b, pair.priors.as_ref()) else {
            continue;
        };
        let log_p = pipeline::assignment_log_engine(
            &mut e,
            &fa,
            &fb,
            &bound.dustbin,
            match_settings.sinkhorn_iterations,
            match_settings.sinkhorn_temperature,
        );
        let p = kernels::exp(&log_p);
        let assignment =
            crate::assignment::AssignmentMatrix::from_matrix(p, pair.a.descriptors.rows(), pair.b.descriptors.rows());
        let matches = crate::assignment::recover_matches(&assignment, match_settings.confidence_threshold);
        let report = score_matches(&matches, &pair.gt);
        total += report.f1;
    }
    total / pairs.len() as f64
}

/// Trains from `initial` parameters, early-stopping on validation loss.
/// Returns the parameters at the best validation loss plus the log.
pub fn train(
    initial: &ModelParams,
    dataset: &[TrainingPair],
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochRecord>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng);
    let val_count = ((dataset.len() as f64 * config.val_fraction).round() as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = indices.split_at(val_count);
    let val_pairs: Vec<&TrainingPair> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut params = initial.clone();
    let mut state = OptimizerState::new(&params, config.learning_rate);
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = loss_and_gradients(&params, &batch, &config.loss)?;
            optimizer_step(&mut params, &grads, &mut state)?;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let val_batch: Vec<&TrainingPair> = val_pairs.clone();
        let val_loss = if val_batch.is_empty() { train_loss } else { batch_loss(&params, &val_batch, &config.loss)? };
        let val_f1 = validation_f1(&params, &val_pairs, &config.loss, config.confidence_threshold);
        log.push(EpochRecord { epoch, train_loss, val_loss, val_f1 });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > config.patience {
                break;
            }
        }
    }
    Ok((best_params, log))
}

/// Builds a precomputed training pair from a synthetic scene.
pub fn training_pair_from_synth(pair: &SynthPair, params: &ModelParams, th: f64) -> Result<TrainingPair, TrainError> {
    use crate::gnn::AttentionVariant;
    let motion = MotionPrior::Pose(pair.prior_ab.clone());
    let input = PairInput {
        feats_a: &pair.feats_a,
        feats_b: &pair.feats_b,
        k_a: &pair.k_a,
        k_b: &pair.k_b,
        motion: &motion,
    };
    let priors = if params.config.variant == AttentionVariant::Vanilla {
        None
    } else {
        build_prior_pack(&input, params.config.sigma)?
    };
    let gt = crate::losses::build_ground_truth(
        &pair.k_a,
        &pair.k_b,
        crate::losses::GtWarp::Pose(&pair.t_ab),
        &pair.feats_a,
        &pair.feats_b,
        th,
    )
    .map_err(PipelineError::from)?;
    Ok(TrainingPair {
        a: GnnInputs::new(
            pair.feats_a.normalized_positions(pair.k_a.width, pair.k_a.height),
            pair.feats_a.descriptors().clone(),
        ),
        b: GnnInputs::new(
            pair.feats_b.normalized_positions(pair.k_b.width, pair.k_b.height),
            pair.feats_b.descriptors().clone(),
        ),
        priors,
        gt,
    })
}

/// Generates a synthetic dataset of training pairs.
pub fn synth_dataset(
    params: &ModelParams,
    opts: &SynthOptions,
    count: usize,
    seed: u64,
    th: f64,
) -> Result<Vec<TrainingPair>, TrainError> {
    (0..count)
        .map(|i| {
            let scene = synth_scene(seed.wrapping_add(i as u64), opts);
            training_pair_from_synth(&scene, params, th)
        })
        .collect()
}

/// Result of checking one tensor against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckRecord {
    pub name: String,
    pub max_rel_error: f64,
}

/// Verifies analytic gradients of every learnable tensor against central
/// finite differences (step `h`) on one training pair. The error of an
/// entry is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn gradient_check(
    params: &ModelParams,
    pair: &TrainingPair,
    settings: &LossSettings,
    h: f64,
) -> Result<Vec<GradCheckRecord>, TrainError> {
    let (_, grads) = loss_and_gradients(params, &[pair], settings)?;
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut records = Vec::new();
    for (tensor_idx, name) in names.iter().enumerate() {
        let shape = params.tensors()[tensor_idx].1.shape();
        let mut max_rel: f64 = 0.0;
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let eval = |delta: f64| -> Result<f64, TrainError> {
                    let mut perturbed = params.clone();
                    {
                        let mut tensors = perturbed.tensors_mut();
                        let t = &mut tensors[tensor_idx].1;
                        let old = t.get(r, c);
                        t.set(r, c, old + delta);
                    }
                    batch_loss(&perturbed, &[pair], settings)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let ad = grads.tensors[tensor_idx].1.get(r, c);
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
        records.push(GradCheckRecord { name: name.clone(), max_rel_error: max_rel });
    }
    Ok(records)
}
