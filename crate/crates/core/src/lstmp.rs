//! Projected LSTM cell with diagonal peepholes, recurrent and non-recurrent
//! projections, and an optional injection point for an external feature
//! stream.
//!
//! One forward step computes
//!
//! ```text
//! i_t = σ(W_ix x_t + W_ir r_{t-1} + w_ic ⊙ c_{t-1} + b_i)
//! f_t = σ(W_fx x_t + W_fr r_{t-1} + w_fc ⊙ c_{t-1} + b_f)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ tanh(W_cx x_t + W_cr r_{t-1} + b_c)
//! o_t = σ(W_ox x_t + W_or r_{t-1} + w_oc ⊙ c_t + b_o)
//! m_t = o_t ⊙ tanh(c_t)
//! r_t = W_rm m_t
//! p_t = W_pm m_t
//! y_t = W_yr r_t + W_yp p_t + b_y
//! ```
//!
//! When injection is configured, `W_inj r'_t` is added to the pre-activation
//! of the chosen receiver: one of the three gates or the argument of the
//! cell-input nonlinearity `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{axpy, sigmoid, Matrix, Vector};

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LstmError {
    #[error("dimension mismatch in {name}: expected {expected:?}, got {got:?}")]
    DimMismatch {
        name: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("phonetic feature supplied without injection weights, or vice versa")]
    InjectionMismatch,
    #[error("injection weights present but receiver is None")]
    NoneReceiverWithWeights,
    #[error("step cache does not match parameters: {0}")]
    CacheMismatch(&'static str),
}

/// Where an injected feature enters the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverKind {
    InputGate,
    ForgetGate,
    OutputGate,
    GFunction,
    #[default]
    None,
}

impl ReceiverKind {
    pub const ALL: [ReceiverKind; 5] = [
        ReceiverKind::None,
        ReceiverKind::InputGate,
        ReceiverKind::ForgetGate,
        ReceiverKind::OutputGate,
        ReceiverKind::GFunction,
    ];

    pub fn is_none(self) -> bool {
        self == ReceiverKind::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReceiverKind::InputGate => "input_gate",
            ReceiverKind::ForgetGate => "forget_gate",
            ReceiverKind::OutputGate => "output_gate",
            ReceiverKind::GFunction => "g_function",
            ReceiverKind::None => "none",
        }
    }
}

impl std::str::FromStr for ReceiverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReceiverKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown receiver '{s}'"))
    }
}

impl std::fmt::Display for ReceiverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams {
    pub receiver: ReceiverKind,
    /// cell_dim × feat_dim
    pub w_inj: Matrix,
}

impl InjectionParams {
    pub fn feat_dim(&self) -> usize {
        self.w_inj.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmDims {
    pub input_dim: usize,
    pub cell_dim: usize,
    pub rec_dim: usize,
    pub proj_dim: usize,
    pub out_dim: usize,
}

/// All weights of one projected LSTM layer and its affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ix: Matrix,
    pub w_ir: Matrix,
    pub w_fx: Matrix,
    pub w_fr: Matrix,
    pub w_cx: Matrix,
    pub w_cr: Matrix,
    pub w_ox: Matrix,
    pub w_or: Matrix,
    /// Diagonal peephole weights.
    pub w_ic: Vector,
    pub w_fc: Vector,
    pub w_oc: Vector,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_c: Vector,
    pub b_o: Vector,
    pub w_rm: Matrix,
    pub w_pm: Matrix,
    pub w_yr: Matrix,
    pub w_yp: Matrix,
    pub b_y: Vector,
    pub inj: Option<InjectionParams>,
}

/// Borrowed view of one named parameter tensor. Vectors appear as `n × 1`.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

macro_rules! tensor_list {
    ($self:ident, $m:ident, $v:ident, $dm:ident, $dv:ident) => {{
        let LstmParams {
            w_ix,
            w_ir,
            w_fx,
            w_fr,
            w_cx,
            w_cr,
            w_ox,
            w_or,
            w_ic,
            w_fc,
            w_oc,
            b_i,
            b_f,
            b_c,
            b_o,
            w_rm,
            w_pm,
            w_yr,
            w_yp,
            b_y,
            inj,
        } = $self;
        let mut out = vec![
            $m!("w_ix", w_ix, $dm),
            $m!("w_ir", w_ir, $dm),
            $m!("w_fx", w_fx, $dm),
            $m!("w_fr", w_fr, $dm),
            $m!("w_cx", w_cx, $dm),
            $m!("w_cr", w_cr, $dm),
            $m!("w_ox", w_ox, $dm),
            $m!("w_or", w_or, $dm),
            $v!("w_ic", w_ic, $dv),
            $v!("w_fc", w_fc, $dv),
            $v!("w_oc", w_oc, $dv),
            $v!("b_i", b_i, $dv),
            $v!("b_f", b_f, $dv),
            $v!("b_c", b_c, $dv),
            $v!("b_o", b_o, $dv),
            $m!("w_rm", w_rm, $dm),
            $m!("w_pm", w_pm, $dm),
            $m!("w_yr", w_yr, $dm),
            $m!("w_yp", w_yp, $dm),
            $v!("b_y", b_y, $dv),
        ];
        if let Some(inj) = inj {
            out.push($m!("w_inj", inj.w_inj, $dm));
        }
        out
    }};
}

macro_rules! mat_ref {
    ($n:expr, $m:expr, $d:ident) => {
        TensorRef {
            name: $n,
            rows: $m.rows(),
            cols: $m.cols(),
            data: $m.$d(),
        }
    };
}

macro_rules! vec_ref {
    ($n:expr, $v:expr, $d:ident) => {
        TensorRef {
            name: $n,
            rows: $v.len(),
            cols: 1,
            data: $v.$d(),
        }
    };
}

macro_rules! mat_mut {
    ($n:expr, $m:expr, $d:ident) => {{
        let (rows, cols) = $m.shape();
        TensorMut {
            name: $n,
            rows,
            cols,
            data: $m.$d(),
        }
    }};
}

macro_rules! vec_mut {
    ($n:expr, $v:expr, $d:ident) => {
        TensorMut {
            name: $n,
            rows: $v.len(),
            cols: 1,
            data: $v.$d(),
        }
    };
}

impl LstmParams {
    /// All-zero parameters. `injection` is `(receiver, feat_dim)`; a `None`
    /// receiver yields no injection weights.
    pub fn zeros(dims: LstmDims, injection: Option<(ReceiverKind, usize)>) -> Self {
        let LstmDims {
            input_dim,
            cell_dim,
            rec_dim,
            proj_dim,
            out_dim,
        } = dims;
        let inj = match injection {
            Some((receiver, feat_dim)) if !receiver.is_none() => Some(InjectionParams {
                receiver,
                w_inj: Matrix::zeros(cell_dim, feat_dim),
            }),
            _ => None,
        };
        LstmParams {
            w_ix: Matrix::zeros(cell_dim, input_dim),
            w_ir: Matrix::zeros(cell_dim, rec_dim),
            w_fx: Matrix::zeros(cell_dim, input_dim),
            w_fr: Matrix::zeros(cell_dim, rec_dim),
            w_cx: Matrix::zeros(cell_dim, input_dim),
            w_cr: Matrix::zeros(cell_dim, rec_dim),
            w_ox: Matrix::zeros(cell_dim, input_dim),
            w_or: Matrix::zeros(cell_dim, rec_dim),
            w_ic: vec![0.0; cell_dim],
            w_fc: vec![0.0; cell_dim],
            w_oc: vec![0.0; cell_dim],
            b_i: vec![0.0; cell_dim],
            b_f: vec![0.0; cell_dim],
            b_c: vec![0.0; cell_dim],
            b_o: vec![0.0; cell_dim],
            w_rm: Matrix::zeros(rec_dim, cell_dim),
            w_pm: Matrix::zeros(proj_dim, cell_dim),
            w_yr: Matrix::zeros(out_dim, rec_dim),
            w_yp: Matrix::zeros(out_dim, proj_dim),
            b_y: vec![0.0; out_dim],
            inj,
        }
    }

    /// Weights uniform in `(-INIT_SCALE, INIT_SCALE)`, biases zero.
    pub fn init_uniform<R: Rng>(
        dims: LstmDims,
        injection: Option<(ReceiverKind, usize)>,
        rng: &mut R,
    ) -> Self {
        let mut p = LstmParams::zeros(dims, injection);
        for t in p.tensors_mut() {
            if t.name.starts_with("b_") {
                continue;
            }
            for v in t.data.iter_mut() {
                *v = rng.random_range(-INIT_SCALE..INIT_SCALE);
            }
        }
        p
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let injection = self
            .inj
            .as_ref()
            .map(|inj| (inj.receiver, inj.feat_dim()));
        LstmParams::zeros(self.dims(), injection)
    }

    pub fn dims(&self) -> LstmDims {
        LstmDims {
            input_dim: self.w_ix.cols(),
            cell_dim: self.w_ix.rows(),
            rec_dim: self.w_rm.rows(),
            proj_dim: self.w_pm.rows(),
            out_dim: self.b_y.len(),
        }
    }

    pub fn receiver(&self) -> ReceiverKind {
        self.inj.as_ref().map_or(ReceiverKind::None, |i| i.receiver)
    }

    /// Checks every tensor shape against the dimensions implied by `w_ix`,
    /// `w_rm`, `w_pm` and `b_y`.
    pub fn validate(&self) -> Result<(), LstmError> {
        let d = self.dims();
        let check = |name: &'static str, got: (usize, usize), expected: (usize, usize)| {
            if got == expected {
                Ok(())
            } else {
                Err(LstmError::DimMismatch {
                    name,
                    expected,
                    got,
                })
            }
        };
        check("w_ir", self.w_ir.shape(), (d.cell_dim, d.rec_dim))?;
        check("w_fx", self.w_fx.shape(), (d.cell_dim, d.input_dim))?;
        check("w_fr", self.w_fr.shape(), (d.cell_dim, d.rec_dim))?;
        check("w_cx", self.w_cx.shape(), (d.cell_dim, d.input_dim))?;
        check("w_cr", self.w_cr.shape(), (d.cell_dim, d.rec_dim))?;
        check("w_ox", self.w_ox.shape(), (d.cell_dim, d.input_dim))?;
        check("w_or", self.w_or.shape(), (d.cell_dim, d.rec_dim))?;
        for (name, v) in [
            ("w_ic", &self.w_ic),
            ("w_fc", &self.w_fc),
            ("w_oc", &self.w_oc),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ] {
            check(name, (v.len(), 1), (d.cell_dim, 1))?;
        }
        check("w_pm", self.w_pm.shape(), (d.proj_dim, d.cell_dim))?;
        check("w_rm", self.w_rm.shape(), (d.rec_dim, d.cell_dim))?;
        check("w_yr", self.w_yr.shape(), (d.out_dim, d.rec_dim))?;
        check("w_yp", self.w_yp.shape(), (d.out_dim, d.proj_dim))?;
        if let Some(inj) = &self.inj {
            if inj.receiver.is_none() {
                return Err(LstmError::NoneReceiverWithWeights);
            }
            check(
                "w_inj",
                inj.w_inj.shape(),
                (d.cell_dim, inj.w_inj.cols()),
            )?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        tensor_list!(self, mat_ref, vec_ref, data, as_slice)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        tensor_list!(self, mat_mut, vec_mut, data_mut, as_mut_slice)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Concatenation of all tensors in [`LstmParams::tensors`] order.
    pub fn to_flat(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// Inverse of [`LstmParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &LstmParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, b.data, a.data);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Vector,
    pub r: Vector,
}

impl CellState {
    pub fn zeros(dims: &LstmDims) -> Self {
        CellState {
            c: vec![0.0; dims.cell_dim],
            r: vec![0.0; dims.rec_dim],
        }
    }
}

/// Everything one forward step produced, kept for its backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vector,
    pub c_prev: Vector,
    pub r_prev: Vector,
    pub phon_feat: Option<Vector>,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    /// Output of `g`, i.e. `tanh` of the cell-input pre-activation.
    pub g: Vector,
    pub c: Vector,
    /// `tanh(c_t)`
    pub h: Vector,
    pub m: Vector,
    pub r: Vector,
    pub p: Vector,
}

/// Gradients flowing out of one step into its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    /// Only computed on request by [`cell_backward_into`].
    pub grad_x: Option<Vector>,
    pub grad_prev_r: Vector,
    pub grad_prev_c: Vector,
    pub grad_phon_feat: Option<Vector>,
}

fn check_len(name: &'static str, v: &[f64], want: usize) -> Result<(), LstmError> {
    if v.len() != want {
        return Err(LstmError::DimMismatch {
            name,
            expected: (want, 1),
            got: (v.len(), 1),
        });
    }
    Ok(())
}

fn check_finite(name: &'static str, v: &[f64]) -> Result<(), LstmError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LstmError::NonFinite(name))
    }
}

/// One forward step. Returns the new state, the non-recurrent projection
/// `p_t` and the cache needed by [`cell_backward`].
pub fn cell_forward(
    params: &LstmParams,
    x: &[f64],
    prev: &CellState,
    phon_feat: Option<&[f64]>,
) -> Result<(CellState, Vector, StepCache), LstmError> {
    params.validate()?;
    let d = params.dims();
    check_len("x", x, d.input_dim)?;
    check_len("c_prev", &prev.c, d.cell_dim)?;
    check_len("r_prev", &prev.r, d.rec_dim)?;
    check_finite("x", x)?;
    match (&params.inj, phon_feat) {
        (Some(inj), Some(feat)) => {
            check_len("phon_feat", feat, inj.feat_dim())?;
            check_finite("phon_feat", feat)?;
        }
        (None, None) => {}
        _ => return Err(LstmError::InjectionMismatch),
    }

    let n = d.cell_dim;
    let r_prev = &prev.r;
    let c_prev = &prev.c;

    let affine = |wx: &Matrix, wr: &Matrix, b: &[f64]| {
        let mut a = b.to_vec();
        wx.matvec_add(x, &mut a);
        wr.matvec_add(r_prev, &mut a);
        a
    };
    let mut a_i = affine(&params.w_ix, &params.w_ir, &params.b_i);
    let mut a_f = affine(&params.w_fx, &params.w_fr, &params.b_f);
    let mut a_g = affine(&params.w_cx, &params.w_cr, &params.b_c);
    let mut a_o = affine(&params.w_ox, &params.w_or, &params.b_o);
    for k in 0..n {
        a_i[k] += params.w_ic[k] * c_prev[k];
        a_f[k] += params.w_fc[k] * c_prev[k];
    }
    if let (Some(inj), Some(feat)) = (&params.inj, phon_feat) {
        let target = match inj.receiver {
            ReceiverKind::InputGate => &mut a_i,
            ReceiverKind::ForgetGate => &mut a_f,
            ReceiverKind::OutputGate => &mut a_o,
            ReceiverKind::GFunction => &mut a_g,
            ReceiverKind::None => unreachable!("validated above"),
        };
        inj.w_inj.matvec_add(feat, target);
    }

    let i: Vector = a_i.iter().map(|&v| sigmoid(v)).collect();
    let f: Vector = a_f.iter().map(|&v| sigmoid(v)).collect();
    let g: Vector = a_g.iter().map(|&v| v.tanh()).collect();
    let c: Vector = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    for k in 0..n {
        a_o[k] += params.w_oc[k] * c[k];
    }
    let o: Vector = a_o.iter().map(|&v| sigmoid(v)).collect();
    let h: Vector = c.iter().map(|&v| v.tanh()).collect();
    let m: Vector = (0..n).map(|k| o[k] * h[k]).collect();
    let r = params.w_rm.matvec(&m);
    let p = params.w_pm.matvec(&m);

    let state = CellState {
        c: c.clone(),
        r: r.clone(),
    };
    let cache = StepCache {
        x: x.to_vec(),
        c_prev: c_prev.clone(),
        r_prev: r_prev.clone(),
        phon_feat: phon_feat.map(|v| v.to_vec()),
        i,
        f,
        o,
        g,
        c,
        h,
        m,
        r,
        p: p.clone(),
    };
    Ok((state, p, cache))
}

/// `y_t = W_yr r_t + W_yp p_t + b_y`
pub fn output_forward(params: &LstmParams, r: &[f64], p: &[f64]) -> Result<Vector, LstmError> {
    let d = params.dims();
    if params.w_yr.shape() != (d.out_dim, d.rec_dim) {
        return Err(LstmError::DimMismatch {
            name: "w_yr",
            expected: (d.out_dim, d.rec_dim),
            got: params.w_yr.shape(),
        });
    }
    if params.w_yp.shape() != (d.out_dim, d.proj_dim) {
        return Err(LstmError::DimMismatch {
            name: "w_yp",
            expected: (d.out_dim, d.proj_dim),
            got: params.w_yp.shape(),
        });
    }
    check_len("r", r, d.rec_dim)?;
    check_len("p", p, d.proj_dim)?;
    let mut y = params.b_y.clone();
    params.w_yr.matvec_add(r, &mut y);
    params.w_yp.matvec_add(p, &mut y);
    Ok(y)
}

/// Reverse of [`output_forward`]: accumulates `W_yr`, `W_yp`, `b_y`
/// gradients and returns `(dL/dr, dL/dp)`.
pub fn output_backward(
    params: &LstmParams,
    r: &[f64],
    p: &[f64],
    grad_y: &[f64],
    grads: &mut LstmParams,
) -> (Vector, Vector) {
    grads.w_yr.add_outer(grad_y, r);
    grads.w_yp.add_outer(grad_y, p);
    axpy(1.0, grad_y, &mut grads.b_y);
    let mut gr = vec![0.0; r.len()];
    let mut gp = vec![0.0; p.len()];
    params.w_yr.matvec_t_add(grad_y, &mut gr);
    params.w_yp.matvec_t_add(grad_y, &mut gp);
    (gr, gp)
}

/// Backward pass of one step, allocating a fresh gradient container.
///
/// `grad_r` is the total gradient on `r_t` (output layer plus the next
/// step), `grad_c` the gradient on `c_t` arriving from the next step only,
/// and `grad_p` the gradient on `p_t`.
pub fn cell_backward(
    params: &LstmParams,
    cache: &StepCache,
    grad_r: &[f64],
    grad_c: &[f64],
    grad_p: &[f64],
) -> Result<(LstmParams, InputGrads), LstmError> {
    let mut grads = params.zeros_like();
    let inputs = cell_backward_into(params, cache, grad_r, grad_c, grad_p, &mut grads, true)?;
    Ok((grads, inputs))
}

/// Backward pass of one step, accumulating parameter gradients into
/// `grads`. `grad_x` is skipped unless `want_grad_x`.
pub fn cell_backward_into(
    params: &LstmParams,
    cache: &StepCache,
    grad_r: &[f64],
    grad_c: &[f64],
    grad_p: &[f64],
    grads: &mut LstmParams,
    want_grad_x: bool,
) -> Result<InputGrads, LstmError> {
    let d = params.dims();
    let n = d.cell_dim;
    if cache.x.len() != d.input_dim {
        return Err(LstmError::CacheMismatch("x"));
    }
    if cache.c.len() != n || cache.c_prev.len() != n {
        return Err(LstmError::CacheMismatch("cell"));
    }
    if cache.r_prev.len() != d.rec_dim {
        return Err(LstmError::CacheMismatch("r_prev"));
    }
    if cache.phon_feat.is_some() != params.inj.is_some() {
        return Err(LstmError::CacheMismatch("phon_feat"));
    }
    if grads.dims() != d || grads.receiver() != params.receiver() {
        return Err(LstmError::CacheMismatch("gradient container"));
    }
    check_len("grad_r", grad_r, d.rec_dim)?;
    check_len("grad_c", grad_c, n)?;
    check_len("grad_p", grad_p, d.proj_dim)?;

    let StepCache {
        x,
        c_prev,
        r_prev,
        phon_feat,
        i,
        f,
        o,
        g,
        c,
        h,
        m,
        ..
    } = cache;

    grads.w_rm.add_outer(grad_r, m);
    grads.w_pm.add_outer(grad_p, m);
    let mut dm = vec![0.0; n];
    params.w_rm.matvec_t_add(grad_r, &mut dm);
    params.w_pm.matvec_t_add(grad_p, &mut dm);

    let mut da_o = vec![0.0; n];
    let mut dc = vec![0.0; n];
    for k in 0..n {
        da_o[k] = dm[k] * h[k] * o[k] * (1.0 - o[k]);
        dc[k] = grad_c[k] + dm[k] * o[k] * (1.0 - h[k] * h[k]) + da_o[k] * params.w_oc[k];
        grads.w_oc[k] += da_o[k] * c[k];
    }

    let mut da_i = vec![0.0; n];
    let mut da_f = vec![0.0; n];
    let mut da_g = vec![0.0; n];
    let mut grad_prev_c = vec![0.0; n];
    for k in 0..n {
        da_i[k] = dc[k] * g[k] * i[k] * (1.0 - i[k]);
        da_f[k] = dc[k] * c_prev[k] * f[k] * (1.0 - f[k]);
        da_g[k] = dc[k] * i[k] * (1.0 - g[k] * g[k]);
        grad_prev_c[k] = dc[k] * f[k] + da_i[k] * params.w_ic[k] + da_f[k] * params.w_fc[k];
        grads.w_ic[k] += da_i[k] * c_prev[k];
        grads.w_fc[k] += da_f[k] * c_prev[k];
    }

    let mut grad_prev_r = vec![0.0; d.rec_dim];
    let mut grad_x = want_grad_x.then(|| vec![0.0; d.input_dim]);
    {
        let LstmParams {
            w_ix,
            w_ir,
            w_fx,
            w_fr,
            w_cx,
            w_cr,
            w_ox,
            w_or,
            b_i,
            b_f,
            b_c,
            b_o,
            ..
        } = grads;
        let gates: [(&[f64], &mut Matrix, &mut Matrix, &mut Vector, &Matrix, &Matrix); 4] = [
            (&da_i, w_ix, w_ir, b_i, &params.w_ix, &params.w_ir),
            (&da_f, w_fx, w_fr, b_f, &params.w_fx, &params.w_fr),
            (&da_g, w_cx, w_cr, b_c, &params.w_cx, &params.w_cr),
            (&da_o, w_ox, w_or, b_o, &params.w_ox, &params.w_or),
        ];
        for (da, gwx, gwr, gb, wx, wr) in gates {
            gwx.add_outer(da, x);
            gwr.add_outer(da, r_prev);
            axpy(1.0, da, gb);
            wr.matvec_t_add(da, &mut grad_prev_r);
            if let Some(gx) = grad_x.as_mut() {
                wx.matvec_t_add(da, gx);
            }
        }
    }

    let grad_phon_feat = match (&params.inj, phon_feat) {
        (Some(inj), Some(feat)) => {
            let da = match inj.receiver {
                ReceiverKind::InputGate => &da_i,
                ReceiverKind::ForgetGate => &da_f,
                ReceiverKind::OutputGate => &da_o,
                ReceiverKind::GFunction => &da_g,
                ReceiverKind::None => unreachable!(),
            };
            let ginj = grads.inj.as_mut().expect("checked receiver match");
            ginj.w_inj.add_outer(da, feat);
            let mut gf = vec![0.0; feat.len()];
            inj.w_inj.matvec_t_add(da, &mut gf);
            Some(gf)
        }
        _ => None,
    };

    Ok(InputGrads {
        grad_x,
        grad_prev_r,
        grad_prev_c,
        grad_phon_feat,
    })
}
