//! Forward evaluation and analytic backpropagation.
//!
//! Training-time entry points return cache structs (`LatticeForward`,
//! `FrameForward`, `IlmForward`) that hold every intermediate needed to
//! push loss gradients back into a parameter-shaped accumulator. The
//! inference entry points (`encode`, `predict`, `joint_eval`, ...) share
//! the same primitives without caching.

use crate::numkit::{self, Matrix};
use crate::{Error, Result};

use super::params::{AffineParams, CtcHeadParams, JointHeadParams};
use super::{
    CtcHeadKind, EncoderOutput, FrameDistributions, JointLattice, JointOutput, ModelParameters,
    PredictionState, TokenId,
};

/// Head logits before any normalization.
#[derive(Debug, Clone)]
pub(crate) enum HeadLogits {
    Rnnt(Vec<f64>),
    Hat { blank: f64, label: Vec<f64> },
}

fn affine_vec(layer: &AffineParams, x: &[f64]) -> Vec<f64> {
    let mut y = layer.weight.matvec(x);
    for (v, b) in y.iter_mut().zip(&layer.bias) {
        *v += b;
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Encoder

pub(crate) struct EncoderForward {
    pub stacked: Matrix,
    /// Post-tanh activations per layer; the last one is the encoder output.
    pub activations: Vec<Matrix>,
    pub source_frames: usize,
}

impl EncoderForward {
    pub(crate) fn hidden(&self) -> &Matrix {
        self.activations
            .last()
            .expect("encoder has at least one layer")
    }

    fn into_output(mut self) -> EncoderOutput {
        EncoderOutput {
            hidden: self
                .activations
                .pop()
                .expect("encoder has at least one layer"),
            source_frames: self.source_frames,
        }
    }
}

impl ModelParameters {
    fn stack_frames(&self, features: &Matrix) -> Matrix {
        let cfg = &self.config;
        let s = cfg.stride;
        let d_x = cfg.feature_dim;
        let groups = if cfg.causal { 1 } else { 2 };
        let t_out = cfg.encoder_len(features.rows());
        let mut out = Matrix::zeros(t_out, groups * s * d_x);
        for t in 0..t_out {
            let row = out.row_mut(t);
            for slot in 0..groups * s {
                let src = t * s + slot;
                if src < features.rows() {
                    row[slot * d_x..(slot + 1) * d_x].copy_from_slice(features.row(src));
                }
            }
        }
        out
    }

    pub(crate) fn encoder_forward(&self, features: &Matrix) -> Result<EncoderForward> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "features have dimension {}, model expects {}",
                features.cols(),
                self.config.feature_dim
            )));
        }
        let stacked = self.stack_frames(features);
        let t_out = stacked.rows();
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            let mut act = Matrix::zeros(t_out, self.config.hidden_dim);
            for t in 0..t_out {
                let input = if l == 0 {
                    stacked.row(t)
                } else {
                    activations[l - 1].row(t)
                };
                let mut a = affine_vec(layer, input);
                numkit::tanh_inplace(&mut a);
                act.row_mut(t).copy_from_slice(&a);
            }
            activations.push(act);
        }
        Ok(EncoderForward {
            stacked,
            activations,
            source_frames: features.rows(),
        })
    }

    /// Subsampled encoder states for an utterance.
    pub fn encode(&self, features: &Matrix) -> Result<EncoderOutput> {
        Ok(self.encoder_forward(features)?.into_output())
    }

    fn encoder_backward(
        &self,
        fwd: &EncoderForward,
        d_hidden: Matrix,
        grads: &mut ModelParameters,
    ) {
        let mut d = d_hidden;
        for l in (0..self.encoder.len()).rev() {
            let act = &fwd.activations[l];
            let layer = &self.encoder[l];
            let in_dim = layer.weight.cols();
            let mut d_in = Matrix::zeros(act.rows(), in_dim);
            for t in 0..act.rows() {
                let a = act.row(t);
                let dpre: Vec<f64> = d
                    .row(t)
                    .iter()
                    .zip(a)
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect();
                let input = if l == 0 {
                    fwd.stacked.row(t)
                } else {
                    fwd.activations[l - 1].row(t)
                };
                let gl = &mut grads.encoder[l];
                gl.weight.add_outer(&dpre, input);
                for (b, g) in gl.bias.iter_mut().zip(&dpre) {
                    *b += g;
                }
                if l > 0 {
                    d_in.row_mut(t)
                        .copy_from_slice(&layer.weight.matvec_transpose(&dpre));
                }
            }
            d = d_in;
        }
    }
}

// ---------------------------------------------------------------------------
// Prediction network

#[derive(Debug, Clone)]
pub(crate) struct GruStepCache {
    token: TokenId,
    h_prev: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    cand: Vec<f64>,
    pub hidden: Vec<f64>,
}

pub(crate) struct PredictionForward {
    /// `steps[0]` consumes the start symbol from the zero state;
    /// `steps[u]` for `u >= 1` consumes the `u`-th prefix label.
    pub steps: Vec<GruStepCache>,
}

impl PredictionForward {
    pub(crate) fn state(&self, u: usize) -> &[f64] {
        &self.steps[u].hidden
    }
}

impl ModelParameters {
    fn validate_labels(&self, labels: &[TokenId]) -> Result<()> {
        for &tok in labels {
            if tok == self.config.blank_id || tok >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "label {tok} is blank or out of vocabulary"
                )));
            }
        }
        Ok(())
    }

    fn gru_step(&self, token: TokenId, h_prev: &[f64]) -> GruStepCache {
        let g = &self.recurrence;
        let e = self.embedding.row(token);
        let mut z = g.w_update.matvec(e);
        let zh = g.u_update.matvec(h_prev);
        for i in 0..z.len() {
            z[i] = numkit::sigmoid(z[i] + zh[i] + g.b_update[i]);
        }
        let mut r = g.w_reset.matvec(e);
        let rh = g.u_reset.matvec(h_prev);
        for i in 0..r.len() {
            r[i] = numkit::sigmoid(r[i] + rh[i] + g.b_reset[i]);
        }
        let gated: Vec<f64> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();
        let mut c = g.w_cand.matvec(e);
        let ch = g.u_cand.matvec(&gated);
        for i in 0..c.len() {
            c[i] = (c[i] + ch[i] + g.b_cand[i]).tanh();
        }
        let hidden: Vec<f64> = (0..c.len())
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i])
            .collect();
        GruStepCache {
            token,
            h_prev: h_prev.to_vec(),
            update: z,
            reset: r,
            cand: c,
            hidden,
        }
    }

    pub(crate) fn prediction_forward(&self, labels: &[TokenId]) -> Result<PredictionForward> {
        self.validate_labels(labels)?;
        let d_h = self.config.hidden_dim;
        let mut steps = Vec::with_capacity(labels.len() + 1);
        steps.push(self.gru_step(self.config.blank_id, &vec![0.0; d_h]));
        for &tok in labels {
            let h = steps.last().unwrap().hidden.clone();
            steps.push(self.gru_step(tok, &h));
        }
        Ok(PredictionForward { steps })
    }

    /// Prediction state after consuming a full label prefix.
    ///
    /// The empty prefix already includes one recurrence step on the
    /// start symbol, so `predict(&[])` is not the zero state.
    pub fn predict(&self, prefix: &[TokenId]) -> Result<PredictionState> {
        self.validate_labels(prefix)?;
        let d_h = self.config.hidden_dim;
        let mut h = self.gru_step(self.config.blank_id, &vec![0.0; d_h]).hidden;
        for &tok in prefix {
            h = self.gru_step(tok, &h).hidden;
        }
        Ok(PredictionState {
            hidden: h,
            consumed: prefix.len(),
        })
    }

    /// Advance a prediction state by one non-blank label.
    pub fn predict_step(&self, state: &PredictionState, token: TokenId) -> Result<PredictionState> {
        self.validate_labels(&[token])?;
        Ok(PredictionState {
            hidden: self.gru_step(token, &state.hidden).hidden,
            consumed: state.consumed + 1,
        })
    }

    /// One recurrence step backward: accumulates parameter gradients and
    /// returns the gradient w.r.t. the previous hidden state.
    fn gru_step_backward(
        &self,
        step: &GruStepCache,
        dh: &[f64],
        grads: &mut ModelParameters,
    ) -> Vec<f64> {
        let g = &self.recurrence;
        let n = dh.len();
        let h_prev = &step.h_prev;
        let (z, r, c) = (&step.update, &step.reset, &step.cand);
        let e = self.embedding.row(step.token);

        let mut dh_prev = vec![0.0; n];
        let mut dpre_c = vec![0.0; n];
        let mut dpre_z = vec![0.0; n];
        for i in 0..n {
            let dz = dh[i] * (c[i] - h_prev[i]);
            let dc = dh[i] * z[i];
            dh_prev[i] += dh[i] * (1.0 - z[i]);
            dpre_c[i] = dc * (1.0 - c[i] * c[i]);
            dpre_z[i] = dz * z[i] * (1.0 - z[i]);
        }
        let gated: Vec<f64> = r.iter().zip(h_prev).map(|(&ri, &hi)| ri * hi).collect();
        let through_u = g.u_cand.matvec_transpose(&dpre_c);
        let mut dpre_r = vec![0.0; n];
        for i in 0..n {
            let dr = through_u[i] * h_prev[i];
            dh_prev[i] += through_u[i] * r[i];
            dpre_r[i] = dr * r[i] * (1.0 - r[i]);
        }

        let gg = &mut grads.recurrence;
        gg.w_cand.add_outer(&dpre_c, e);
        gg.u_cand.add_outer(&dpre_c, &gated);
        gg.w_update.add_outer(&dpre_z, e);
        gg.u_update.add_outer(&dpre_z, h_prev);
        gg.w_reset.add_outer(&dpre_r, e);
        gg.u_reset.add_outer(&dpre_r, h_prev);
        for i in 0..n {
            gg.b_cand[i] += dpre_c[i];
            gg.b_update[i] += dpre_z[i];
            gg.b_reset[i] += dpre_r[i];
        }

        let mut de = g.w_cand.matvec_transpose(&dpre_c);
        let de_z = g.w_update.matvec_transpose(&dpre_z);
        let de_r = g.w_reset.matvec_transpose(&dpre_r);
        let dh_z = g.u_update.matvec_transpose(&dpre_z);
        let dh_r = g.u_reset.matvec_transpose(&dpre_r);
        for i in 0..n {
            de[i] += de_z[i] + de_r[i];
            dh_prev[i] += dh_z[i] + dh_r[i];
        }
        let emb_row = grads.embedding.row_mut(step.token);
        for i in 0..n {
            emb_row[i] += de[i];
        }
        dh_prev
    }

    /// Backpropagate through the whole prefix recurrence.
    ///
    /// `d_states[u]` is the loss gradient w.r.t. the state after step `u`.
    fn prediction_backward(
        &self,
        fwd: &PredictionForward,
        d_states: Vec<Vec<f64>>,
        grads: &mut ModelParameters,
    ) {
        debug_assert_eq!(d_states.len(), fwd.steps.len());
        let mut carry = vec![0.0; self.config.hidden_dim];
        for (u, step) in fwd.steps.iter().enumerate().rev() {
            for (c, d) in carry.iter_mut().zip(&d_states[u]) {
                *c += d;
            }
            carry = self.gru_step_backward(step, &carry, grads);
        }
        // The gradient w.r.t. the initial zero state is discarded.
    }
}

// ---------------------------------------------------------------------------
// Joint network

impl ModelParameters {
    /// Shared tanh projection. `None` stands for an all-zero input, used
    /// by the internal acoustic model (no prediction input) and the
    /// internal language model (no encoder input).
    pub(crate) fn joint_pre(&self, h_enc: Option<&[f64]>, h_pred: Option<&[f64]>) -> Vec<f64> {
        let j = &self.joint;
        let mut pre = match h_enc {
            Some(h) => j.enc_proj.matvec(h),
            None => vec![0.0; self.config.hidden_dim],
        };
        if let Some(h) = h_pred {
            let p = j.pred_proj.matvec(h);
            for (a, b) in pre.iter_mut().zip(&p) {
                *a += b;
            }
        }
        for (a, b) in pre.iter_mut().zip(&j.bias) {
            *a += b;
        }
        numkit::tanh_inplace(&mut pre);
        pre
    }

    pub(crate) fn head_logits(&self, j: &[f64]) -> HeadLogits {
        match &self.joint.head {
            JointHeadParams::Rnnt { out } => HeadLogits::Rnnt(affine_vec(out, j)),
            JointHeadParams::Hat { blank, label } => HeadLogits::Hat {
                blank: dot(blank.weight.row(0), j) + blank.bias[0],
                label: affine_vec(label, j),
            },
        }
    }

    /// Blank logit of the factorized head; the blank posterior is its sigmoid.
    pub(crate) fn hat_blank_logit(&self, j: &[f64]) -> f64 {
        match &self.joint.head {
            JointHeadParams::Hat { blank, .. } => dot(blank.weight.row(0), j) + blank.bias[0],
            JointHeadParams::Rnnt { .. } => unreachable!("blank head requires factorized joint"),
        }
    }

    /// Label logits of the factorized head, length `K - 1`.
    pub(crate) fn hat_label_logits(&self, j: &[f64]) -> Vec<f64> {
        match &self.joint.head {
            JointHeadParams::Hat { label, .. } => affine_vec(label, j),
            JointHeadParams::Rnnt { .. } => unreachable!("label head requires factorized joint"),
        }
    }

    /// Full-vocabulary logits of the single-softmax head, length `K`.
    pub(crate) fn rnnt_logits(&self, j: &[f64]) -> Vec<f64> {
        match &self.joint.head {
            JointHeadParams::Rnnt { out } => affine_vec(out, j),
            JointHeadParams::Hat { .. } => unreachable!("single-softmax head not present"),
        }
    }

    fn write_log_dist(&self, logits: &HeadLogits, out: &mut [f64]) {
        match logits {
            HeadLogits::Rnnt(lg) => out.copy_from_slice(&numkit::log_softmax(lg)),
            HeadLogits::Hat { blank, label } => {
                out[0] = numkit::log_sigmoid(*blank);
                let stay = numkit::log_one_minus_sigmoid(*blank);
                let lsm = numkit::log_softmax(label);
                for (o, l) in out[1..].iter_mut().zip(&lsm) {
                    *o = stay + l;
                }
            }
        }
    }

    /// Output distribution for one encoder frame / prediction state pair.
    pub fn joint_eval(&self, h_enc: &[f64], h_pred: &[f64]) -> Result<JointOutput> {
        let d_h = self.config.hidden_dim;
        if h_enc.len() != d_h || h_pred.len() != d_h {
            return Err(Error::InvalidArgument(format!(
                "joint inputs must have dimension {d_h}"
            )));
        }
        let j = self.joint_pre(Some(h_enc), Some(h_pred));
        Ok(match self.head_logits(&j) {
            HeadLogits::Rnnt(lg) => JointOutput::Rnnt {
                probs: numkit::softmax(&lg)?,
            },
            HeadLogits::Hat { blank, label } => JointOutput::Hat {
                blank: numkit::sigmoid(blank),
                label: numkit::softmax(&label)?,
            },
        })
    }

    /// Head gradient for a combined log-distribution gradient `dlog`
    /// (length `K`); accumulates head parameter gradients and returns the
    /// gradient w.r.t. the post-tanh projection `j`.
    fn head_backward(
        &self,
        j: &[f64],
        logits: &HeadLogits,
        dlog: &[f64],
        grads: &mut ModelParameters,
    ) -> Vec<f64> {
        match (logits, &mut grads.joint.head) {
            (HeadLogits::Rnnt(lg), JointHeadParams::Rnnt { out: gout }) => {
                let p = numkit::softmax(lg).expect("logits are non-empty");
                let s: f64 = dlog.iter().sum();
                let dlogit: Vec<f64> = dlog.iter().zip(&p).map(|(&g, &pi)| g - pi * s).collect();
                gout.weight.add_outer(&dlogit, j);
                for (b, g) in gout.bias.iter_mut().zip(&dlogit) {
                    *b += g;
                }
                match &self.joint.head {
                    JointHeadParams::Rnnt { out } => out.weight.matvec_transpose(&dlogit),
                    _ => unreachable!(),
                }
            }
            (
                HeadLogits::Hat { blank, label },
                JointHeadParams::Hat {
                    blank: gblank,
                    label: glabel,
                },
            ) => {
                let sig = numkit::sigmoid(*blank);
                let sm = numkit::softmax(label).expect("label logits are non-empty");
                let s_lab: f64 = dlog[1..].iter().sum();
                let dbl = dlog[0] * (1.0 - sig) - sig * s_lab;
                let dll: Vec<f64> = dlog[1..]
                    .iter()
                    .zip(&sm)
                    .map(|(&g, &pi)| g - pi * s_lab)
                    .collect();
                gblank.weight.add_outer(&[dbl], j);
                gblank.bias[0] += dbl;
                glabel.weight.add_outer(&dll, j);
                for (b, g) in glabel.bias.iter_mut().zip(&dll) {
                    *b += g;
                }
                match &self.joint.head {
                    JointHeadParams::Hat {
                        blank: pb,
                        label: pl,
                    } => {
                        let mut dj = pl.weight.matvec_transpose(&dll);
                        for (d, w) in dj.iter_mut().zip(pb.weight.row(0)) {
                            *d += w * dbl;
                        }
                        dj
                    }
                    _ => unreachable!(),
                }
            }
            _ => unreachable!("head logits and head parameters agree by construction"),
        }
    }

    /// Projection gradient: accumulates `enc_proj` / `pred_proj` / bias
    /// gradients and returns gradients w.r.t. the active inputs.
    fn joint_pre_backward(
        &self,
        j: &[f64],
        dj: &[f64],
        h_enc: Option<&[f64]>,
        h_pred: Option<&[f64]>,
        grads: &mut ModelParameters,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let djpre: Vec<f64> = dj.iter().zip(j).map(|(&g, &y)| g * (1.0 - y * y)).collect();
        for (b, g) in grads.joint.bias.iter_mut().zip(&djpre) {
            *b += g;
        }
        let d_enc = h_enc.map(|h| {
            grads.joint.enc_proj.add_outer(&djpre, h);
            self.joint.enc_proj.matvec_transpose(&djpre)
        });
        let d_pred = h_pred.map(|h| {
            grads.joint.pred_proj.add_outer(&djpre, h);
            self.joint.pred_proj.matvec_transpose(&djpre)
        });
        (d_enc, d_pred)
    }
}

// ---------------------------------------------------------------------------
// Training caches

#[derive(Debug, Clone)]
struct CellCache {
    pre: Vec<f64>,
    logits: HeadLogits,
}

/// Forward pass over the full `(t, u)` grid with cached intermediates.
pub struct LatticeForward {
    enc: EncoderForward,
    pred: PredictionForward,
    cells: Vec<CellCache>,
    lattice: JointLattice,
}

impl LatticeForward {
    pub fn lattice(&self) -> &JointLattice {
        &self.lattice
    }

    pub fn into_lattice(self) -> JointLattice {
        self.lattice
    }

    fn cell(&self, t: usize, u: usize) -> &CellCache {
        &self.cells[t * self.lattice.u_len() + u]
    }

    /// Push a gradient w.r.t. the lattice log-probabilities back into
    /// parameter space. `dlat` must have the lattice's shape.
    pub fn backprop(
        &self,
        params: &ModelParameters,
        dlat: &JointLattice,
        grads: &mut ModelParameters,
    ) -> Result<()> {
        if dlat.t_len() != self.lattice.t_len()
            || dlat.u_len() != self.lattice.u_len()
            || dlat.vocab() != self.lattice.vocab()
        {
            return Err(Error::InvalidArgument(
                "gradient lattice shape does not match forward lattice".into(),
            ));
        }
        let t_len = self.lattice.t_len();
        let u_len = self.lattice.u_len();
        let d_h = params.config.hidden_dim;
        let mut d_enc = Matrix::zeros(t_len, d_h);
        let mut d_states = vec![vec![0.0; d_h]; u_len];
        for t in 0..t_len {
            for u in 0..u_len {
                let dlog = dlat.slice(t, u);
                if dlog.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let cell = self.cell(t, u);
                let dj = params.head_backward(&cell.pre, &cell.logits, dlog, grads);
                let (de, dp) = params.joint_pre_backward(
                    &cell.pre,
                    &dj,
                    Some(self.enc.hidden().row(t)),
                    Some(self.pred.state(u)),
                    grads,
                );
                let row = d_enc.row_mut(t);
                for (a, b) in row.iter_mut().zip(de.unwrap()) {
                    *a += b;
                }
                for (a, b) in d_states[u].iter_mut().zip(dp.unwrap()) {
                    *a += b;
                }
            }
        }
        params.encoder_backward(&self.enc, d_enc, grads);
        params.prediction_backward(&self.pred, d_states, grads);
        Ok(())
    }
}

enum FramePath {
    Linear,
    Factored,
    Iam(Vec<CellCache>),
}

/// Forward pass of the per-frame head with cached intermediates.
pub struct FrameForward {
    enc: EncoderForward,
    path: FramePath,
    dists: FrameDistributions,
}

impl FrameForward {
    pub fn distributions(&self) -> &FrameDistributions {
        &self.dists
    }

    /// Push a gradient w.r.t. the per-frame log-probabilities (`T x K`)
    /// back into parameter space.
    pub fn backprop(
        &self,
        params: &ModelParameters,
        dlog: &Matrix,
        grads: &mut ModelParameters,
    ) -> Result<()> {
        if dlog.rows() != self.dists.frames() || dlog.cols() != self.dists.vocab() {
            return Err(Error::InvalidArgument(
                "gradient shape does not match frame distributions".into(),
            ));
        }
        let t_len = dlog.rows();
        let d_h = params.config.hidden_dim;
        let mut d_enc = Matrix::zeros(t_len, d_h);
        for t in 0..t_len {
            let g = dlog.row(t);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let h_t = self.enc.hidden().row(t);
            match &self.path {
                FramePath::Linear => {
                    let (layer, glayer) = match (&params.ctc_head, &mut grads.ctc_head) {
                        (CtcHeadParams::Linear(a), CtcHeadParams::Linear(b)) => (a, b),
                        _ => unreachable!("linear path implies linear head"),
                    };
                    let p = self.dists.probs_row(t);
                    let s: f64 = g.iter().sum();
                    let dlogit: Vec<f64> = g.iter().zip(&p).map(|(&gi, &pi)| gi - pi * s).collect();
                    glayer.weight.add_outer(&dlogit, h_t);
                    for (b, d) in glayer.bias.iter_mut().zip(&dlogit) {
                        *b += d;
                    }
                    let row = d_enc.row_mut(t);
                    for (a, b) in row.iter_mut().zip(layer.weight.matvec_transpose(&dlogit)) {
                        *a += b;
                    }
                }
                FramePath::Factored => {
                    let (pb, pl, gb, gl) = match (&params.ctc_head, &mut grads.ctc_head) {
                        (
                            CtcHeadParams::Factored { blank, label },
                            CtcHeadParams::Factored {
                                blank: gblank,
                                label: glabel,
                            },
                        ) => (blank, label, gblank, glabel),
                        _ => unreachable!("factored path implies factored head"),
                    };
                    let bl = dot(pb.weight.row(0), h_t) + pb.bias[0];
                    let ll = affine_vec(pl, h_t);
                    let sig = numkit::sigmoid(bl);
                    let sm = numkit::softmax(&ll).expect("label logits are non-empty");
                    let s_lab: f64 = g[1..].iter().sum();
                    let dbl = g[0] * (1.0 - sig) - sig * s_lab;
                    let dll: Vec<f64> = g[1..]
                        .iter()
                        .zip(&sm)
                        .map(|(&gi, &pi)| gi - pi * s_lab)
                        .collect();
                    gb.weight.add_outer(&[dbl], h_t);
                    gb.bias[0] += dbl;
                    gl.weight.add_outer(&dll, h_t);
                    for (b, d) in gl.bias.iter_mut().zip(&dll) {
                        *b += d;
                    }
                    let mut dh = pl.weight.matvec_transpose(&dll);
                    for (d, w) in dh.iter_mut().zip(pb.weight.row(0)) {
                        *d += w * dbl;
                    }
                    let row = d_enc.row_mut(t);
                    for (a, b) in row.iter_mut().zip(dh) {
                        *a += b;
                    }
                }
                FramePath::Iam(cells) => {
                    let cell = &cells[t];
                    let dj = params.head_backward(&cell.pre, &cell.logits, g, grads);
                    let (de, _) = params.joint_pre_backward(&cell.pre, &dj, Some(h_t), None, grads);
                    let row = d_enc.row_mut(t);
                    for (a, b) in row.iter_mut().zip(de.unwrap()) {
                        *a += b;
                    }
                }
            }
        }
        params.encoder_backward(&self.enc, d_enc, grads);
        Ok(())
    }
}

/// Forward pass of the internal language model over a label sequence.
pub struct IlmForward {
    pred: PredictionForward,
    cells: Vec<IlmCell>,
    /// `step_log_probs[u]` is the log label distribution conditioned on
    /// the first `u` labels, length `K - 1`.
    step_log_probs: Vec<Vec<f64>>,
}

struct IlmCell {
    pre: Vec<f64>,
}

impl IlmForward {
    pub fn step_log_probs(&self) -> &[Vec<f64>] {
        &self.step_log_probs
    }

    /// Push per-step gradients w.r.t. the log label distributions back
    /// into parameter space. Encoder tensors receive exactly zero.
    pub fn backprop(
        &self,
        params: &ModelParameters,
        dsteps: &[Vec<f64>],
        grads: &mut ModelParameters,
    ) -> Result<()> {
        if dsteps.len() != self.cells.len() {
            return Err(Error::InvalidArgument(
                "gradient step count does not match forward pass".into(),
            ));
        }
        let d_h = params.config.hidden_dim;
        let mut d_states = vec![vec![0.0; d_h]; self.pred.steps.len()];
        for (u, cell) in self.cells.iter().enumerate() {
            let g = &dsteps[u];
            let sm: Vec<f64> = self.step_log_probs[u].iter().map(|&x| x.exp()).collect();
            let s: f64 = g.iter().sum();
            let dll: Vec<f64> = g.iter().zip(&sm).map(|(&gi, &pi)| gi - pi * s).collect();
            let dj = match (&params.joint.head, &mut grads.joint.head) {
                (JointHeadParams::Hat { label, .. }, JointHeadParams::Hat { label: gl, .. }) => {
                    gl.weight.add_outer(&dll, &cell.pre);
                    for (b, d) in gl.bias.iter_mut().zip(&dll) {
                        *b += d;
                    }
                    label.weight.matvec_transpose(&dll)
                }
                (JointHeadParams::Rnnt { out }, JointHeadParams::Rnnt { out: gout }) => {
                    // Only the label rows participate; the blank row is
                    // dropped before the softmax.
                    let mut dj = vec![0.0; d_h];
                    for (i, &d) in dll.iter().enumerate() {
                        let row = out.weight.row(i + 1);
                        let grow = gout.weight.row_mut(i + 1);
                        for k in 0..d_h {
                            grow[k] += d * cell.pre[k];
                            dj[k] += d * row[k];
                        }
                        gout.bias[i + 1] += d;
                    }
                    dj
                }
                _ => unreachable!("gradient head matches parameter head"),
            };
            let (_, dp) =
                params.joint_pre_backward(&cell.pre, &dj, None, Some(self.pred.state(u)), grads);
            for (a, b) in d_states[u].iter_mut().zip(dp.unwrap()) {
                *a += b;
            }
        }
        params.prediction_backward(&self.pred, d_states, grads);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training-time entry points and frame-level views

impl ModelParameters {
    /// Full `(t, u)` forward pass with caches for backpropagation.
    pub fn lattice_forward(&self, features: &Matrix, labels: &[TokenId]) -> Result<LatticeForward> {
        self.validate_labels(labels)?;
        let enc = self.encoder_forward(features)?;
        let pred = self.prediction_forward(labels)?;
        let t_len = enc.hidden().rows();
        let u_len = labels.len() + 1;
        let k = self.config.vocab_size;
        let mut lattice = JointLattice::zeros(t_len, u_len, k);
        let mut cells = Vec::with_capacity(t_len * u_len);
        // The projection splits over its two inputs, so each side is
        // computed once per frame / per state.
        let enc_parts: Vec<Vec<f64>> = (0..t_len)
            .map(|t| self.joint.enc_proj.matvec(enc.hidden().row(t)))
            .collect();
        let pred_parts: Vec<Vec<f64>> = (0..u_len)
            .map(|u| self.joint.pred_proj.matvec(pred.state(u)))
            .collect();
        for t in 0..t_len {
            for u in 0..u_len {
                let mut pre: Vec<f64> = enc_parts[t]
                    .iter()
                    .zip(&pred_parts[u])
                    .zip(&self.joint.bias)
                    .map(|((&a, &b), &c)| a + b + c)
                    .collect();
                numkit::tanh_inplace(&mut pre);
                let logits = self.head_logits(&pre);
                self.write_log_dist(&logits, lattice.slice_mut(t, u));
                cells.push(CellCache { pre, logits });
            }
        }
        Ok(LatticeForward {
            enc,
            pred,
            cells,
            lattice,
        })
    }

    /// Training-output lattice of per-cell log-distributions.
    pub fn lattice(&self, features: &Matrix, labels: &[TokenId]) -> Result<JointLattice> {
        Ok(self.lattice_forward(features, labels)?.into_lattice())
    }

    /// Per-frame head forward pass with caches for backpropagation.
    ///
    /// Resolves to the configured head; the `Iam` kind evaluates the
    /// joint network with the prediction input zeroed.
    pub fn frame_forward(&self, features: &Matrix) -> Result<FrameForward> {
        let enc = self.encoder_forward(features)?;
        let t_len = enc.hidden().rows();
        let k = self.config.vocab_size;
        let mut log_probs = Matrix::zeros(t_len, k);
        let path = match self.config.ctc_head {
            CtcHeadKind::None => {
                return Err(Error::Config(
                    "model has no per-frame head configured".into(),
                ))
            }
            CtcHeadKind::Ctc => {
                let layer = match &self.ctc_head {
                    CtcHeadParams::Linear(a) => a,
                    _ => unreachable!("head kind and parameters agree"),
                };
                for t in 0..t_len {
                    let lg = affine_vec(layer, enc.hidden().row(t));
                    log_probs
                        .row_mut(t)
                        .copy_from_slice(&numkit::log_softmax(&lg));
                }
                FramePath::Linear
            }
            CtcHeadKind::Fctc => {
                let (blank, label) = match &self.ctc_head {
                    CtcHeadParams::Factored { blank, label } => (blank, label),
                    _ => unreachable!("head kind and parameters agree"),
                };
                for t in 0..t_len {
                    let h_t = enc.hidden().row(t);
                    let bl = dot(blank.weight.row(0), h_t) + blank.bias[0];
                    let ll = affine_vec(label, h_t);
                    let row = log_probs.row_mut(t);
                    row[0] = numkit::log_sigmoid(bl);
                    let stay = numkit::log_one_minus_sigmoid(bl);
                    for (o, l) in row[1..].iter_mut().zip(numkit::log_softmax(&ll)) {
                        *o = stay + l;
                    }
                }
                FramePath::Factored
            }
            CtcHeadKind::Iam => {
                let mut cells = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let pre = self.joint_pre(Some(enc.hidden().row(t)), None);
                    let logits = self.head_logits(&pre);
                    self.write_log_dist(&logits, log_probs.row_mut(t));
                    cells.push(CellCache { pre, logits });
                }
                FramePath::Iam(cells)
            }
        };
        Ok(FrameForward {
            enc,
            path,
            dists: FrameDistributions::new(log_probs),
        })
    }

    /// Per-frame distributions of the configured head (see [`Self::frame_forward`]).
    pub fn ctc_head_eval(&self, features: &Matrix) -> Result<FrameDistributions> {
        Ok(self.frame_forward(features)?.dists)
    }

    /// Per-frame distributions of the configured head on precomputed
    /// encoder states, without training caches.
    pub fn head_distributions_from_encoder(
        &self,
        enc: &EncoderOutput,
    ) -> Result<FrameDistributions> {
        let t_len = enc.frames();
        let k = self.config.vocab_size;
        let mut log_probs = Matrix::zeros(t_len, k);
        match self.config.ctc_head {
            CtcHeadKind::None => {
                return Err(Error::Config(
                    "model has no per-frame head configured".into(),
                ))
            }
            CtcHeadKind::Iam => return self.iam_from_encoder(enc),
            CtcHeadKind::Ctc => {
                let layer = match &self.ctc_head {
                    CtcHeadParams::Linear(a) => a,
                    _ => unreachable!("head kind and parameters agree"),
                };
                for t in 0..t_len {
                    let lg = affine_vec(layer, enc.frame(t));
                    log_probs
                        .row_mut(t)
                        .copy_from_slice(&numkit::log_softmax(&lg));
                }
            }
            CtcHeadKind::Fctc => {
                let (blank, label) = match &self.ctc_head {
                    CtcHeadParams::Factored { blank, label } => (blank, label),
                    _ => unreachable!("head kind and parameters agree"),
                };
                for t in 0..t_len {
                    let h_t = enc.frame(t);
                    let bl = dot(blank.weight.row(0), h_t) + blank.bias[0];
                    let ll = affine_vec(label, h_t);
                    let row = log_probs.row_mut(t);
                    row[0] = numkit::log_sigmoid(bl);
                    let stay = numkit::log_one_minus_sigmoid(bl);
                    for (o, l) in row[1..].iter_mut().zip(numkit::log_softmax(&ll)) {
                        *o = stay + l;
                    }
                }
            }
        }
        Ok(FrameDistributions::new(log_probs))
    }

    /// Internal acoustic model: the joint network per encoder frame with
    /// the prediction input zeroed. Defined for every model; adds no
    /// parameters.
    pub fn iam_eval(&self, features: &Matrix) -> Result<FrameDistributions> {
        let enc = self.encode(features)?;
        self.iam_from_encoder(&enc)
    }

    /// Internal acoustic model on precomputed encoder states.
    pub fn iam_from_encoder(&self, enc: &EncoderOutput) -> Result<FrameDistributions> {
        let t_len = enc.frames();
        let mut log_probs = Matrix::zeros(t_len, self.config.vocab_size);
        for t in 0..t_len {
            let pre = self.joint_pre(Some(enc.frame(t)), None);
            let logits = self.head_logits(&pre);
            self.write_log_dist(&logits, log_probs.row_mut(t));
        }
        Ok(FrameDistributions::new(log_probs))
    }

    /// Internal language model: next-label distribution (length `K - 1`)
    /// after a prefix, from the joint network with the encoder input
    /// zeroed. For the single-softmax head the blank logit is dropped and
    /// the remaining logits renormalized.
    pub fn ilm_eval(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let state = self.predict(prefix)?;
        let pre = self.joint_pre(None, Some(state.hidden()));
        let logits = match self.head_logits(&pre) {
            HeadLogits::Hat { label, .. } => label,
            HeadLogits::Rnnt(lg) => lg[1..].to_vec(),
        };
        numkit::softmax(&logits)
    }

    /// Internal language model forward pass over a whole sequence with
    /// caches for backpropagation.
    pub fn ilm_forward(&self, labels: &[TokenId]) -> Result<IlmForward> {
        self.validate_labels(labels)?;
        let prefix_len = labels.len().saturating_sub(1);
        let pred = self.prediction_forward(&labels[..prefix_len])?;
        let mut cells = Vec::with_capacity(labels.len());
        let mut step_log_probs = Vec::with_capacity(labels.len());
        for u in 0..labels.len() {
            let pre = self.joint_pre(None, Some(pred.state(u)));
            let label_logits = match self.head_logits(&pre) {
                HeadLogits::Hat { label, .. } => label,
                HeadLogits::Rnnt(lg) => lg[1..].to_vec(),
            };
            step_log_probs.push(numkit::log_softmax(&label_logits));
            cells.push(IlmCell { pre });
        }
        Ok(IlmForward {
            pred,
            cells,
            step_log_probs,
        })
    }
}
