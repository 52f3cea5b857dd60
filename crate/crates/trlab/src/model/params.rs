//! Parameter container, initialization and flat-vector arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numkit::Matrix;
use crate::{Error, Result};

use super::{CtcHeadKind, ModelConfig, TransducerMode};

/// A dense layer: `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineParams {
    fn init(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        AffineParams {
            weight: init_matrix(rows, cols, rng),
            bias: vec![0.0; rows],
        }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        AffineParams {
            weight: Matrix::zeros(rows, cols),
            bias: vec![0.0; rows],
        }
    }
}

/// Gated recurrent cell over label embeddings.
///
/// `w_*` act on the input embedding, `u_*` on the previous hidden state:
/// update gate `z`, reset gate `r` and candidate state `c` with
/// `h' = (1 - z) .* h + z .* c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_update: Matrix,
    pub u_update: Matrix,
    pub b_update: Vec<f64>,
    pub w_reset: Matrix,
    pub u_reset: Matrix,
    pub b_reset: Vec<f64>,
    pub w_cand: Matrix,
    pub u_cand: Matrix,
    pub b_cand: Vec<f64>,
}

impl GruParams {
    fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        GruParams {
            w_update: init_matrix(hidden, hidden, rng),
            u_update: init_matrix(hidden, hidden, rng),
            b_update: vec![0.0; hidden],
            w_reset: init_matrix(hidden, hidden, rng),
            u_reset: init_matrix(hidden, hidden, rng),
            b_reset: vec![0.0; hidden],
            w_cand: init_matrix(hidden, hidden, rng),
            u_cand: init_matrix(hidden, hidden, rng),
            b_cand: vec![0.0; hidden],
        }
    }

    fn zeros(hidden: usize) -> Self {
        GruParams {
            w_update: Matrix::zeros(hidden, hidden),
            u_update: Matrix::zeros(hidden, hidden),
            b_update: vec![0.0; hidden],
            w_reset: Matrix::zeros(hidden, hidden),
            u_reset: Matrix::zeros(hidden, hidden),
            b_reset: vec![0.0; hidden],
            w_cand: Matrix::zeros(hidden, hidden),
            u_cand: Matrix::zeros(hidden, hidden),
            b_cand: vec![0.0; hidden],
        }
    }
}

/// Output head of the joint network.
#[derive(Debug, Clone, PartialEq)]
pub enum JointHeadParams {
    /// One affine map to `K` logits, softmax over the full vocabulary.
    Rnnt { out: AffineParams },
    /// Factorized: scalar blank logit plus `K - 1` label logits.
    Hat {
        blank: AffineParams,
        label: AffineParams,
    },
}

/// Joint network: shared tanh projection feeding the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub enc_proj: Matrix,
    pub pred_proj: Matrix,
    pub bias: Vec<f64>,
    pub head: JointHeadParams,
}

/// Optional per-frame head on the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub enum CtcHeadParams {
    /// No head; also used for the parameter-free internal acoustic model,
    /// which borrows the joint network instead of owning weights.
    None,
    /// Linear layer to `K` logits.
    Linear(AffineParams),
    /// Factorized blank scalar and `K - 1` label logits.
    Factored {
        blank: AffineParams,
        label: AffineParams,
    },
}

/// All trainable tensors plus the architecture description.
///
/// Gradients reuse this type via [`ModelParameters::zeros_like`]: a
/// gradient is a parameter-shaped accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    /// Affine+tanh stack; layer 0 consumes the stacked frame window.
    pub encoder: Vec<AffineParams>,
    /// `K x D_h` label embeddings; row `blank_id` doubles as start-of-sequence.
    pub embedding: Matrix,
    pub recurrence: GruParams,
    pub joint: JointParams,
    pub ctc_head: CtcHeadParams,
}

fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let r = 1.0 / (cols as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.gen_range(-r..=r);
    }
    m
}

impl ModelParameters {
    /// Fresh parameters with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// weights and zero biases, drawn from a seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_h = config.hidden_dim;
        let k = config.vocab_size;
        let window = config.window_frames() * config.feature_dim;

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for layer in 0..config.encoder_layers {
            let in_dim = if layer == 0 { window } else { d_h };
            encoder.push(AffineParams::init(d_h, in_dim, &mut rng));
        }

        let embedding = init_matrix(k, d_h, &mut rng);
        let recurrence = GruParams::init(d_h, &mut rng);

        let head = match config.mode {
            TransducerMode::Rnnt => JointHeadParams::Rnnt {
                out: AffineParams::init(k, d_h, &mut rng),
            },
            TransducerMode::Hat => JointHeadParams::Hat {
                blank: AffineParams::init(1, d_h, &mut rng),
                label: AffineParams::init(k - 1, d_h, &mut rng),
            },
        };
        let joint = JointParams {
            enc_proj: init_matrix(d_h, d_h, &mut rng),
            pred_proj: init_matrix(d_h, d_h, &mut rng),
            bias: vec![0.0; d_h],
            head,
        };

        let ctc_head = match config.ctc_head {
            CtcHeadKind::None | CtcHeadKind::Iam => CtcHeadParams::None,
            CtcHeadKind::Ctc => CtcHeadParams::Linear(AffineParams::init(k, d_h, &mut rng)),
            CtcHeadKind::Fctc => CtcHeadParams::Factored {
                blank: AffineParams::init(1, d_h, &mut rng),
                label: AffineParams::init(k - 1, d_h, &mut rng),
            },
        };

        Ok(ModelParameters {
            config,
            encoder,
            embedding,
            recurrence,
            joint,
            ctc_head,
        })
    }

    /// All-zero parameters for a validated architecture. Checkpoint
    /// loading fills these in tensor by tensor.
    pub(crate) fn zeros_for_config(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d_h = config.hidden_dim;
        let k = config.vocab_size;
        let window = config.window_frames() * config.feature_dim;

        let encoder = (0..config.encoder_layers)
            .map(|layer| {
                let in_dim = if layer == 0 { window } else { d_h };
                AffineParams::zeros(d_h, in_dim)
            })
            .collect();
        let head = match config.mode {
            TransducerMode::Rnnt => JointHeadParams::Rnnt {
                out: AffineParams::zeros(k, d_h),
            },
            TransducerMode::Hat => JointHeadParams::Hat {
                blank: AffineParams::zeros(1, d_h),
                label: AffineParams::zeros(k - 1, d_h),
            },
        };
        let ctc_head = match config.ctc_head {
            CtcHeadKind::None | CtcHeadKind::Iam => CtcHeadParams::None,
            CtcHeadKind::Ctc => CtcHeadParams::Linear(AffineParams::zeros(k, d_h)),
            CtcHeadKind::Fctc => CtcHeadParams::Factored {
                blank: AffineParams::zeros(1, d_h),
                label: AffineParams::zeros(k - 1, d_h),
            },
        };
        Ok(ModelParameters {
            config,
            encoder,
            embedding: Matrix::zeros(k, d_h),
            recurrence: GruParams::zeros(d_h),
            joint: JointParams {
                enc_proj: Matrix::zeros(d_h, d_h),
                pred_proj: Matrix::zeros(d_h, d_h),
                bias: vec![0.0; d_h],
                head,
            },
            ctc_head,
        })
    }

    /// Same shapes, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_for_config(self.config.clone()).expect("existing config is valid")
    }

    /// Visit every tensor in a fixed declared order.
    ///
    /// The order defines the checkpoint layout and the flat-vector layout,
    /// so it must never change silently.
    pub fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(&str, usize, usize, &'a [f64])) {
        for (i, layer) in self.encoder.iter().enumerate() {
            f(
                &format!("encoder.{i}.weight"),
                layer.weight.rows(),
                layer.weight.cols(),
                layer.weight.data(),
            );
            f(
                &format!("encoder.{i}.bias"),
                1,
                layer.bias.len(),
                &layer.bias,
            );
        }
        f(
            "embedding",
            self.embedding.rows(),
            self.embedding.cols(),
            self.embedding.data(),
        );
        let g = &self.recurrence;
        for (name, m) in [
            ("recurrence.w_update", &g.w_update),
            ("recurrence.u_update", &g.u_update),
            ("recurrence.w_reset", &g.w_reset),
            ("recurrence.u_reset", &g.u_reset),
            ("recurrence.w_cand", &g.w_cand),
            ("recurrence.u_cand", &g.u_cand),
        ] {
            f(name, m.rows(), m.cols(), m.data());
        }
        for (name, b) in [
            ("recurrence.b_update", &g.b_update),
            ("recurrence.b_reset", &g.b_reset),
            ("recurrence.b_cand", &g.b_cand),
        ] {
            f(name, 1, b.len(), b);
        }
        let j = &self.joint;
        f(
            "joint.enc_proj",
            j.enc_proj.rows(),
            j.enc_proj.cols(),
            j.enc_proj.data(),
        );
        f(
            "joint.pred_proj",
            j.pred_proj.rows(),
            j.pred_proj.cols(),
            j.pred_proj.data(),
        );
        f("joint.bias", 1, j.bias.len(), &j.bias);
        match &j.head {
            JointHeadParams::Rnnt { out } => {
                f(
                    "joint.out.weight",
                    out.weight.rows(),
                    out.weight.cols(),
                    out.weight.data(),
                );
                f("joint.out.bias", 1, out.bias.len(), &out.bias);
            }
            JointHeadParams::Hat { blank, label } => {
                f(
                    "joint.blank.weight",
                    blank.weight.rows(),
                    blank.weight.cols(),
                    blank.weight.data(),
                );
                f("joint.blank.bias", 1, blank.bias.len(), &blank.bias);
                f(
                    "joint.label.weight",
                    label.weight.rows(),
                    label.weight.cols(),
                    label.weight.data(),
                );
                f("joint.label.bias", 1, label.bias.len(), &label.bias);
            }
        }
        match &self.ctc_head {
            CtcHeadParams::None => {}
            CtcHeadParams::Linear(a) => {
                f(
                    "ctc.out.weight",
                    a.weight.rows(),
                    a.weight.cols(),
                    a.weight.data(),
                );
                f("ctc.out.bias", 1, a.bias.len(), &a.bias);
            }
            CtcHeadParams::Factored { blank, label } => {
                f(
                    "ctc.blank.weight",
                    blank.weight.rows(),
                    blank.weight.cols(),
                    blank.weight.data(),
                );
                f("ctc.blank.bias", 1, blank.bias.len(), &blank.bias);
                f(
                    "ctc.label.weight",
                    label.weight.rows(),
                    label.weight.cols(),
                    label.weight.data(),
                );
                f("ctc.label.bias", 1, label.bias.len(), &label.bias);
            }
        }
    }

    /// Mutable traversal in the same order as [`Self::visit_tensors`].
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            f(&format!("encoder.{i}.weight"), layer.weight.data_mut());
            f(&format!("encoder.{i}.bias"), &mut layer.bias);
        }
        f("embedding", self.embedding.data_mut());
        let g = &mut self.recurrence;
        f("recurrence.w_update", g.w_update.data_mut());
        f("recurrence.u_update", g.u_update.data_mut());
        f("recurrence.w_reset", g.w_reset.data_mut());
        f("recurrence.u_reset", g.u_reset.data_mut());
        f("recurrence.w_cand", g.w_cand.data_mut());
        f("recurrence.u_cand", g.u_cand.data_mut());
        f("recurrence.b_update", &mut g.b_update);
        f("recurrence.b_reset", &mut g.b_reset);
        f("recurrence.b_cand", &mut g.b_cand);
        let j = &mut self.joint;
        f("joint.enc_proj", j.enc_proj.data_mut());
        f("joint.pred_proj", j.pred_proj.data_mut());
        f("joint.bias", &mut j.bias);
        match &mut j.head {
            JointHeadParams::Rnnt { out } => {
                f("joint.out.weight", out.weight.data_mut());
                f("joint.out.bias", &mut out.bias);
            }
            JointHeadParams::Hat { blank, label } => {
                f("joint.blank.weight", blank.weight.data_mut());
                f("joint.blank.bias", &mut blank.bias);
                f("joint.label.weight", label.weight.data_mut());
                f("joint.label.bias", &mut label.bias);
            }
        }
        match &mut self.ctc_head {
            CtcHeadParams::None => {}
            CtcHeadParams::Linear(a) => {
                f("ctc.out.weight", a.weight.data_mut());
                f("ctc.out.bias", &mut a.bias);
            }
            CtcHeadParams::Factored { blank, label } => {
                f("ctc.blank.weight", blank.weight.data_mut());
                f("ctc.blank.bias", &mut blank.bias);
                f("ctc.label.weight", label.weight.data_mut());
                f("ctc.label.bias", &mut label.bias);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, _, _, data| n += data.len());
        n
    }

    /// All tensors concatenated in declared order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_tensors(&mut |_, _, _, data| out.extend_from_slice(data));
        out
    }

    /// Overwrite every tensor from a flat vector in declared order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "flat vector has {} values, model has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut cursor = 0;
        self.visit_tensors_mut(&mut |_, data| {
            data.copy_from_slice(&flat[cursor..cursor + data.len()]);
            cursor += data.len();
        });
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor. Shapes must match.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let o = other.flatten();
        let mut cursor = 0;
        self.visit_tensors_mut(&mut |_, data| {
            for v in data.iter_mut() {
                *v += scale * o[cursor];
                cursor += 1;
            }
        });
    }
}
