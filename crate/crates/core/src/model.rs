//! Declarative architectures for the fish classifiers (and a LeNet-5 shaped
//! reference), plus the cross-validated training, evaluation and prediction
//! drivers.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, SplitPlan, CLASS_NAMES, INPUT_SIDE};
use crate::error::{Error, Result};
use crate::gemm::TileConfig;
use crate::metrics::{multiclass_logloss, MetricsReport, Prediction};
use crate::nn::{softmax_cross_entropy_grad, Mode, Network, Pad, PoolMode};
use crate::optim::{sgd_step, ParamState, SgdConfig};
use crate::seeded_rng;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DROPOUT: f64 = 0.5;
const EVAL_BATCH: usize = 64;

const INIT_STREAM: u64 = 0x300;
const SHUFFLE_STREAM: u64 = 0x400;
const DROPOUT_STREAM: u64 = 0x500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output spatial size equals input size at stride 1; odd totals put the
    /// extra row/column at the bottom/right.
    Same,
    Valid,
    Explicit(Pad),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    Relu,
    Pool {
        window: [usize; 2],
        stride: usize,
        mode: PoolMode,
    },
    Flatten,
    Fc {
        units: usize,
    },
    Dropout {
        p: f64,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// C, H, W of one sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Replaces the drop probability of every dropout layer.
    pub fn with_dropout(mut self, p: f64) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::Dropout { p: old } = layer {
                *old = p;
            }
        }
        self
    }

    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Fc { units } => Some(*units),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Model1,
    Model2,
    Model3,
    Lenet5,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Model1, Variant::Model2, Variant::Model3, Variant::Lenet5];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
            Variant::Model3 => "model3",
            Variant::Lenet5 => "lenet5",
        }
    }

    pub fn config(self) -> ModelConfig {
        self.config_with_side(match self {
            Variant::Lenet5 => 32,
            _ => INPUT_SIDE,
        })
    }

    /// The same layer stack on a `side × side` input.
    pub fn config_with_side(self, side: usize) -> ModelConfig {
        match self {
            Variant::Model1 => fish_config(self.name(), side, [4, 4, 8, 8], [3, 3], [96, 16]),
            Variant::Model2 => fish_config(self.name(), side, [16, 16, 32, 32], [2, 3], [96, 16]),
            Variant::Model3 => fish_config(self.name(), side, [4, 4, 8, 8], [3, 3], [144, 32]),
            Variant::Lenet5 => lenet5_config(side),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model variant {s:?}")))
    }
}

fn conv(filters: usize, k: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel: [k, k],
        stride: 1,
        padding: Padding::Same,
    }
}

fn max_pool() -> LayerSpec {
    LayerSpec::Pool {
        window: [2, 2],
        stride: 2,
        mode: PoolMode::Max,
    }
}

/// conv-relu-conv-relu-pool twice, then two hidden dense layers with
/// dropout and an 8-way softmax.
fn fish_config(name: &str, side: usize, filters: [usize; 4], kernels: [usize; 2], hidden: [usize; 2]) -> ModelConfig {
    use LayerSpec::*;
    ModelConfig {
        name: name.to_string(),
        input: [3, side, side],
        layers: vec![
            conv(filters[0], kernels[0]),
            Relu,
            conv(filters[1], kernels[0]),
            Relu,
            max_pool(),
            conv(filters[2], kernels[1]),
            Relu,
            conv(filters[3], kernels[1]),
            Relu,
            max_pool(),
            Flatten,
            Fc { units: hidden[0] },
            Relu,
            Dropout { p: DEFAULT_DROPOUT },
            Fc { units: hidden[1] },
            Relu,
            Dropout { p: DEFAULT_DROPOUT },
            Fc { units: CLASS_NAMES.len() },
            Softmax,
        ],
    }
}

fn lenet5_config(side: usize) -> ModelConfig {
    use LayerSpec::*;
    let valid = |filters| Conv {
        filters,
        kernel: [5, 5],
        stride: 1,
        padding: Padding::Valid,
    };
    ModelConfig {
        name: "lenet5".into(),
        input: [3, side, side],
        layers: vec![
            valid(6),
            Relu,
            max_pool(),
            valid(16),
            Relu,
            max_pool(),
            Flatten,
            Fc { units: 120 },
            Relu,
            Fc { units: 84 },
            Relu,
            Fc { units: 10 },
            Softmax,
        ],
    }
}

/// Compiles `variant` and draws its initial parameters from `seed`.
pub fn build_model(variant: Variant, seed: u64) -> Result<(Network, ParamState)> {
    build_from_config(&variant.config(), seed)
}

pub fn build_from_config(config: &ModelConfig, seed: u64) -> Result<(Network, ParamState)> {
    let net = Network::from_config(config)?;
    let mut rng = seeded_rng(seed, INIT_STREAM);
    let params = net.init_params(&mut rng)?;
    Ok((net, ParamState::new(params)))
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub network: Network,
    pub params: ParamState,
    pub class_names: Vec<String>,
    /// Epoch-mean training log loss, one curve per fold.
    pub history: Vec<Vec<f64>>,
    pub seed: u64,
    pub fresh_per_fold: bool,
}

impl TrainedModel {
    /// Freshly initialised model with an empty history.
    pub fn untrained(config: ModelConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let (network, params) = build_from_config(&config, seed)?;
        if network.output_shape() != [class_names.len()] {
            return Err(Error::InvalidConfig(format!(
                "{} class names for a network with output {:?}",
                class_names.len(),
                network.output_shape()
            )));
        }
        Ok(TrainedModel {
            config,
            network,
            params,
            class_names,
            history: Vec::new(),
            seed,
            fresh_per_fold: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.network.output_shape()[0]
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub sgd: SgdConfig,
    /// Re-initialise the parameters at the start of every fold.
    pub fresh_per_fold: bool,
    /// Run only the first `n` folds of the plan.
    pub max_folds: Option<usize>,
    pub gemm: TileConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_logloss: Vec<f64>,
    pub validation: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Final epoch of the final fold.
    pub train_logloss_last: f64,
    /// Lowest epoch mean seen in any fold.
    pub train_logloss_best: f64,
    /// Mean over folds of each fold's final epoch.
    pub train_logloss_fold_mean: f64,
    pub validation_logloss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub model: String,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub class_names: Vec<String>,
    pub fresh_per_fold: bool,
    pub weight_decay_on_bias: bool,
    pub folds: Vec<FoldReport>,
    pub summary: TrainSummary,
    pub holdout: Option<MetricsReport>,
}

fn stack(images: &[&LabeledImage], input: [usize; 3]) -> Result<Tensor> {
    let per: usize = input.iter().product();
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.pixels.shape() != input {
            return Err(Error::DimensionMismatch(format!(
                "image {} has shape {:?}, model expects {:?}",
                img.source_id,
                img.pixels.shape(),
                input
            )));
        }
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new(vec![images.len(), input[0], input[1], input[2]], data)
}

fn eval_probs(network: &Network, params: &[Tensor], images: &[&LabeledImage]) -> Result<Vec<f64>> {
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(images.len() * network.output_shape()[0]);
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack(chunk, network.input_shape())?;
        let (probs, _) = network.forward(params, &x, Mode::Eval, &mut rng)?;
        out.extend_from_slice(probs.data());
    }
    Ok(out)
}

fn evaluate_refs(network: &Network, params: &[Tensor], images: &[&LabeledImage]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let m = network.output_shape()[0];
    let probs = Tensor::new(vec![images.len(), m], eval_probs(network, params, images)?)?;
    let labels = images.iter().map(|i| i.label).collect();
    MetricsReport::from_prediction(&Prediction::new(probs, labels)?)
}

/// Log loss, accuracy and confusion matrix with dropout disabled.
pub fn evaluate(model: &TrainedModel, images: &[LabeledImage]) -> Result<MetricsReport> {
    let refs: Vec<&LabeledImage> = images.iter().collect();
    evaluate_refs(&model.network, &model.params.params, &refs)
}

/// Class probability rows for preprocessed `3×H×W` images.
pub fn predict(model: &TrainedModel, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let wrapped: Vec<LabeledImage> = images
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledImage {
            pixels: std::sync::Arc::new(t.clone()),
            label: 0,
            source_id: format!("#{i}"),
        })
        .collect();
    let refs: Vec<&LabeledImage> = wrapped.iter().collect();
    let m = model.classes();
    let flat = eval_probs(&model.network, &model.params.params, &refs)?;
    Ok(flat.chunks(m).map(<[f64]>::to_vec).collect())
}

/// One pass over `order` in mini-batches; returns the sample-weighted mean
/// training log loss.
fn run_epoch(
    network: &Network,
    state: &mut ParamState,
    images: &[LabeledImage],
    order: &[usize],
    sgd: &SgdConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(sgd.batch_size) {
        let refs: Vec<&LabeledImage> = batch.iter().map(|&i| &images[i]).collect();
        let x = stack(&refs, network.input_shape())?;
        let labels: Vec<usize> = refs.iter().map(|r| r.label).collect();
        let (probs, trace) = network.forward(&state.params, &x, Mode::Train, dropout_rng)?;
        let pred = Prediction {
            probs,
            labels,
        };
        total += multiclass_logloss(&pred)? * batch.len() as f64;
        let d_logits = softmax_cross_entropy_grad(&pred.probs, &pred.labels)?;
        let grads = network.backward_from_logits(&state.params, &trace, &d_logits)?;
        sgd_step(state, &grads, sgd)?;
    }
    Ok(total / order.len() as f64)
}

/// Cross-validated training over the folds of `plan`, continuing the same
/// parameters from fold to fold unless `fresh_per_fold` is set. Momentum
/// buffers restart at each fold. The holdout, when non-empty, is scored at
/// the end.
pub fn train(
    config: &ModelConfig,
    balanced: &[LabeledImage],
    plan: &SplitPlan,
    holdout: &[LabeledImage],
    opts: &TrainOptions,
    seed: u64,
) -> Result<(TrainedModel, TrainReport)> {
    opts.sgd.validate()?;
    opts.gemm.validate()?;
    if !plan.matches(balanced) {
        return Err(Error::InvalidConfig(
            "split plan does not describe this dataset; split it before training".into(),
        ));
    }
    let network = Network::from_config(config)?.with_gemm(opts.gemm);
    if network.output_shape() != [plan.class_names.len()] {
        return Err(Error::InvalidConfig(format!(
            "model {} has {:?} outputs but the data has {} classes",
            config.name,
            network.output_shape(),
            plan.class_names.len()
        )));
    }
    let mut init_rng = seeded_rng(seed, INIT_STREAM);
    let mut state = ParamState::new(network.init_params(&mut init_rng)?);
    let mut shuffle_rng = seeded_rng(seed, SHUFFLE_STREAM);
    let mut dropout_rng = seeded_rng(seed, DROPOUT_STREAM);

    let folds = opts.max_folds.map_or(plan.folds, |n| n.clamp(1, plan.folds));
    let mut fold_reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        if fold > 0 && opts.fresh_per_fold {
            state = ParamState::new(network.init_params(&mut init_rng)?);
        }
        state.reset_velocities();
        let mut order = plan.train_indices(fold);
        let val = plan.fold_indices(fold);
        if order.is_empty() || val.is_empty() {
            return Err(Error::Empty(format!("fold {fold} has no training or validation data")));
        }
        let mut curve = Vec::with_capacity(opts.sgd.epochs_per_fold);
        for epoch in 0..opts.sgd.epochs_per_fold {
            order.shuffle(&mut shuffle_rng);
            let loss = run_epoch(&network, &mut state, balanced, &order, &opts.sgd, &mut dropout_rng)?;
            log::info!("{} fold {fold} epoch {epoch}: train logloss {loss:.4}", config.name);
            curve.push(loss);
        }
        let val_refs: Vec<&LabeledImage> = val.iter().map(|&i| &balanced[i]).collect();
        let validation = evaluate_refs(&network, &state.params, &val_refs)?;
        log::info!("{} fold {fold}: validation logloss {:.4}", config.name, validation.logloss);
        fold_reports.push(FoldReport {
            fold,
            train_logloss: curve,
            validation,
        });
    }

    let model = TrainedModel {
        config: config.clone(),
        network,
        params: state,
        class_names: plan.class_names.clone(),
        history: fold_reports.iter().map(|f| f.train_logloss.clone()).collect(),
        seed,
        fresh_per_fold: opts.fresh_per_fold,
    };
    let holdout_metrics = if holdout.is_empty() {
        None
    } else {
        Some(evaluate(&model, holdout)?)
    };
    let summary = summarize(&fold_reports);
    let report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: config.name.clone(),
        seed,
        sgd: opts.sgd,
        class_names: plan.class_names.clone(),
        fresh_per_fold: opts.fresh_per_fold,
        weight_decay_on_bias: true,
        folds: fold_reports,
        summary,
        holdout: holdout_metrics,
    };
    Ok((model, report))
}

fn summarize(folds: &[FoldReport]) -> TrainSummary {
    let lasts: Vec<f64> = folds.iter().filter_map(|f| f.train_logloss.last().copied()).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let vals: Vec<f64> = folds.iter().map(|f| f.validation.logloss).collect();
    TrainSummary {
        train_logloss_last: lasts.last().copied().unwrap_or(f64::NAN),
        train_logloss_best: folds
            .iter()
            .flat_map(|f| f.train_logloss.iter().copied())
            .fold(f64::INFINITY, f64::min),
        train_logloss_fold_mean: mean(&lasts),
        validation_logloss_mean: mean(&vals),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-layer counts for model1 with same padding on a 48×48 input.
    #[test]
    fn model1_parameter_count() {
        let conv = |k: usize, c: usize| k * c * 9 + k;
        let dense = |i: usize, o: usize| i * o + o;
        let expected = conv(4, 3) + conv(4, 4) + conv(8, 4) + conv(8, 8)
            + dense(12 * 12 * 8, 96)
            + dense(96, 16)
            + dense(16, 8);
        assert_eq!(expected, 113_516);
        let (net, state) = build_model(Variant::Model1, 0).unwrap();
        assert_eq!(net.param_count(), expected);
        assert_eq!(state.params.iter().map(Tensor::len).sum::<usize>(), expected);
        let flat = net
            .layer_shapes()
            .iter()
            .zip(net.layers())
            .find(|(_, l)| matches!(l, crate::nn::Layer::Flatten))
            .unwrap()
            .0;
        assert_eq!(flat, &vec![1152]);
    }

    #[test]
    fn model2_same_padding_handles_even_kernels() {
        let (net, _) = build_model(Variant::Model2, 0).unwrap();
        assert_eq!(net.layer_shapes()[0], vec![16, 48, 48]);
        assert_eq!(net.layer_shapes()[4], vec![16, 24, 24]);
        assert_eq!(net.output_shape(), &[8]);
    }

    #[test]
    fn model3_has_wider_head() {
        let cfg = Variant::Model3.config();
        let units: Vec<usize> = cfg
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Fc { units } => Some(*units),
                _ => None,
            })
            .collect();
        assert_eq!(units, vec![144, 32, 8]);
    }

    #[test]
    fn lenet5_shapes() {
        let (net, _) = build_model(Variant::Lenet5, 0).unwrap();
        assert_eq!(net.input_shape(), [3, 32, 32]);
        assert_eq!(net.output_shape(), &[10]);
        let hidden: Vec<usize> = net
            .param_shapes()
            .iter()
            .filter(|s| s.len() == 2)
            .map(|s| s[1])
            .collect();
        assert_eq!(hidden, vec![120, 84, 10]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("alexnet".parse::<Variant>().is_err());
    }

    #[test]
    fn illegal_chain_is_rejected() {
        let cfg = ModelConfig {
            name: "bad".into(),
            input: [3, 8, 8],
            layers: vec![LayerSpec::Fc { units: 4 }],
        };
        assert!(Network::from_config(&cfg).is_err());
        let cfg = ModelConfig {
            name: "odd".into(),
            input: [1, 5, 5],
            layers: vec![max_pool()],
        };
        assert!(Network::from_config(&cfg).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = Variant::Model2.config().with_dropout(0.25);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        assert!(json.contains("\"p\":0.25"));
    }
}
