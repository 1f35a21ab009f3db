//! The multi-head network: shared encoder (C1..C5), feature pyramid decoder
//! (P_out at stride 4) and one head per subtask, selected by explicit
//! branching on the task kind.

mod config;
pub mod detection;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use mhmtl_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ModelConfig, DENSE_STRIDE, MAX_STRIDE, STAGES};
pub use detection::{decode_detection, encode_detection_target, Detection};

use crate::task::{ConfigError, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown subtask `{0}`")]
    UnknownSubtask(String),
    #[error("subtask `{subtask}` is a {kind} task and cannot use the {branch} branch")]
    WrongBranch {
        subtask: String,
        kind: TaskKind,
        branch: &'static str,
    },
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder and pyramid decoder, shared by every subtask.
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
enum Head {
    /// Affine projection of pooled C5 features.
    Global { weight: ParamId, bias: ParamId },
    /// 3×3 conv + ReLU, then 1×1 conv to the output channels.
    Dense { hidden: Conv, out: Conv },
}

impl Head {
    fn params(&self) -> Vec<ParamId> {
        match self {
            Head::Global { weight, bias } => vec![*weight, *bias],
            Head::Dense { hidden, out } => vec![hidden.weight, hidden.bias, out.weight, out.bias],
        }
    }
}

/// Encoder maps C1..C5.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// `levels[i]` is C(i+1), at stride `2^(i+1)`.
    pub levels: [Var; STAGES],
}

impl FeaturePyramid {
    pub fn c(&self, level: usize) -> Var {
        self.levels[level - 1]
    }
}

pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<Vec<Conv>>,
    /// 1×1 lateral convs for C2..C5.
    laterals: Vec<Conv>,
    smooth: Conv,
    heads: BTreeMap<String, Head>,
    pyramid_runs: AtomicUsize,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Uniform in `±sqrt(gain / fan_in)`, zero bias.
    fn conv<T: Scalar>(
        &mut self,
        params: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        gain: f64,
        stride: usize,
        padding: usize,
    ) -> Result<Conv, TensorError> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (gain / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&shape, |_| T::from_f64(self.rng.random_range(-bound..bound)));
        Ok(Conv {
            weight: params.insert(&format!("{name}.weight"), weight)?,
            bias: params.insert(&format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?,
            stride,
            padding,
        })
    }
}

const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 3.0;

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let widths = config.encoder_widths;
        let d = config.fpn_channels;

        let mut encoder = Vec::with_capacity(STAGES);
        let mut in_ch = 1;
        for (s, &width) in widths.iter().enumerate() {
            let mut stage = vec![init.conv(
                &mut params,
                &format!("encoder.stage{}.conv1", s + 1),
                [width, in_ch, 3, 3],
                RELU_GAIN,
                2,
                1,
            )?];
            if config.encoder_double_conv {
                stage.push(init.conv(
                    &mut params,
                    &format!("encoder.stage{}.conv2", s + 1),
                    [width, width, 3, 3],
                    RELU_GAIN,
                    1,
                    1,
                )?);
            }
            encoder.push(stage);
            in_ch = width;
        }

        let laterals = (2..=STAGES)
            .map(|level| {
                init.conv(
                    &mut params,
                    &format!("fpn.lateral{level}"),
                    [d, widths[level - 1], 1, 1],
                    LINEAR_GAIN,
                    1,
                    0,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let smooth = init.conv(&mut params, "fpn.smooth", [d, d, 3, 3], LINEAR_GAIN, 1, 1)?;

        let c5 = widths[STAGES - 1];
        let mut heads = BTreeMap::new();
        for task in &config.tasks {
            let prefix = format!("heads.{}", task.id);
            let out_ch = task.output_width();
            let head = if task.kind.is_dense() {
                Head::Dense {
                    hidden: init.conv(&mut params, &format!("{prefix}.hidden"), [d, d, 3, 3], RELU_GAIN, 1, 1)?,
                    out: init.conv(&mut params, &format!("{prefix}.out"), [out_ch, d, 1, 1], LINEAR_GAIN, 1, 0)?,
                }
            } else {
                let bound = (LINEAR_GAIN / c5 as f64).sqrt();
                let w = Tensor::from_fn(&[out_ch, c5], |_| T::from_f64(init.rng.random_range(-bound..bound)));
                Head::Global {
                    weight: params.insert(&format!("{prefix}.fc.weight"), w)?,
                    bias: params.insert(&format!("{prefix}.fc.bias"), Tensor::zeros(&[out_ch]))?,
                }
            };
            heads.insert(task.id.clone(), head);
        }

        Ok(Self {
            config,
            params,
            encoder,
            laterals,
            smooth,
            heads,
            pyramid_runs: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn task(&self, subtask: &str) -> Result<&TaskSpec, ModelError> {
        self.config
            .task(subtask)
            .ok_or_else(|| ModelError::UnknownSubtask(subtask.to_string()))
    }

    pub fn param_group(&self, id: ParamId) -> ParamGroup {
        if self.params.name(id).starts_with("heads.") {
            ParamGroup::Head
        } else {
            ParamGroup::Backbone
        }
    }

    /// Parameters owned by one subtask's head.
    pub fn head_params(&self, subtask: &str) -> Result<Vec<ParamId>, ModelError> {
        self.heads
            .get(subtask)
            .map(Head::params)
            .ok_or_else(|| ModelError::UnknownSubtask(subtask.to_string()))
    }

    /// How many times the pyramid decoder has executed on this instance.
    pub fn pyramid_runs(&self) -> usize {
        self.pyramid_runs.load(Ordering::Relaxed)
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            laterals: self.laterals.clone(),
            smooth: self.smooth,
            heads: self.heads.clone(),
            pyramid_runs: AtomicUsize::new(0),
        }
    }

    /// Stacks `H×W` grayscale images in `[0, 1]` into an `[N,1,H,W]` tensor.
    pub fn batch_input(&self, images: &[&[f32]]) -> Result<Tensor<T>, ModelError> {
        let [h, w] = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.len() != h * w {
                return Err(ModelError::InputShape {
                    expected: vec![h, w],
                    got: vec![img.len()],
                });
            }
            data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), 1, h, w], data)?)
    }

    fn check_input(&self, g: &Graph<T>, image: Var) -> Result<(), ModelError> {
        let shape = g.shape(image);
        let [h, w] = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(ModelError::InputShape {
                expected: vec![shape.first().copied().unwrap_or(0), 1, h, w],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the shared encoder. No implicit resizing: the input must already
    /// be `[N,1,H,W]` at the configured size.
    pub fn encode(&self, g: &mut Graph<T>, image: Var) -> Result<FeaturePyramid, ModelError> {
        self.check_input(g, image)?;
        let mut x = image;
        let mut levels = [image; STAGES];
        for (s, stage) in self.encoder.iter().enumerate() {
            for conv in stage {
                let y = conv.apply(g, &self.params, x)?;
                x = g.relu(y);
            }
            levels[s] = x;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Top-down pyramid: lateral 1×1 convs on C2..C5, 2× nearest upsampling
    /// and addition from C5 down to C2, then a 3×3 smoothing conv.
    pub fn fpn(&self, g: &mut Graph<T>, pyramid: &FeaturePyramid) -> Result<Var, ModelError> {
        self.pyramid_runs.fetch_add(1, Ordering::Relaxed);
        let lateral = |g: &mut Graph<T>, level: usize| {
            self.laterals[level - 2].apply(g, &self.params, pyramid.c(level))
        };
        let mut top = lateral(g, STAGES)?;
        for level in (2..STAGES).rev() {
            let l = lateral(g, level)?;
            let up = g.upsample_nearest(top, 2)?;
            top = g.add(l, up)?;
        }
        Ok(self.smooth.apply(g, &self.params, top)?)
    }

    fn head(&self, subtask: &str) -> Result<(&TaskSpec, &Head), ModelError> {
        let task = self.task(subtask)?;
        let head = self
            .heads
            .get(subtask)
            .ok_or_else(|| ModelError::UnknownSubtask(subtask.to_string()))?;
        Ok((task, head))
    }

    /// Global branch: `W · Dropout(GAP(C5)) + b`. Regression outputs pass
    /// through a sigmoid so coordinates stay in `[0, 1]`. The pyramid decoder
    /// is never executed here.
    pub fn forward_global<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        image: Var,
        subtask: &str,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let (task, head) = self.head(subtask)?;
        let Head::Global { weight, bias } = head else {
            return Err(ModelError::WrongBranch {
                subtask: subtask.into(),
                kind: task.kind,
                branch: "global",
            });
        };
        let pyramid = self.encode(g, image)?;
        let pooled = g.global_avg_pool(pyramid.c(STAGES))?;
        let dropped = g.dropout(pooled, self.config.dropout_rate, train, rng)?;
        let w = g.param(&self.params, *weight);
        let b = g.param(&self.params, *bias);
        let out = g.affine(dropped, w, b)?;
        Ok(match task.kind {
            TaskKind::Regression => g.sigmoid(out),
            _ => out,
        })
    }

    /// Dense branch. Segmentation returns `[N,K,H,W]` logits (head at
    /// stride 4, then 4× upsampling); detection returns `[N,5,H/4,W/4]` with
    /// sigmoid-activated box channels and a raw objectness logit.
    pub fn forward_dense(&self, g: &mut Graph<T>, image: Var, subtask: &str) -> Result<Var, ModelError> {
        let (task, head) = self.head(subtask)?;
        let Head::Dense { hidden, out } = head else {
            return Err(ModelError::WrongBranch {
                subtask: subtask.into(),
                kind: task.kind,
                branch: "dense",
            });
        };
        let pyramid = self.encode(g, image)?;
        let p_out = self.fpn(g, &pyramid)?;
        let h = hidden.apply(g, &self.params, p_out)?;
        let h = g.relu(h);
        let y = out.apply(g, &self.params, h)?;
        Ok(match task.kind {
            TaskKind::Segmentation => g.upsample_nearest(y, DENSE_STRIDE)?,
            _ => g.sigmoid_channels(y, detection::BOX_CHANNELS)?,
        })
    }

    /// Routes on the subtask's kind.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        image: Var,
        subtask: &str,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        if self.task(subtask)?.kind.is_dense() {
            self.forward_dense(g, image, subtask)
        } else {
            self.forward_global(g, image, subtask, train, rng)
        }
    }
}
