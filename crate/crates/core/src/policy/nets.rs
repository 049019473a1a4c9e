use rand::Rng;

use super::{he_bound, ParamSet, PolicyError};
use crate::camrender::{CameraFrame, CameraId};
use crate::simworld::SpeedCommand;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Flattened trunk output: 32·9·6 top + 16·4·2 bottom.
pub const FEATURES: usize = 1856;
pub const FC_UNITS: usize = 128;
pub const LSTM_HIDDEN: usize = 64;
pub const OUTPUTS: usize = 3;
const KERNEL: usize = 5;
const STRIDE: usize = 2;
const POOL: usize = 2;

/// The two convolutional paths shared by the CNN and the recurrent CNN.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrunk<T: Scalar = f32> {
    pub top_conv1_w: Tensor<T>,
    pub top_conv1_b: Tensor<T>,
    pub top_conv2_w: Tensor<T>,
    pub top_conv2_b: Tensor<T>,
    pub bot_conv1_w: Tensor<T>,
    pub bot_conv1_b: Tensor<T>,
    pub bot_conv2_w: Tensor<T>,
    pub bot_conv2_b: Tensor<T>,
}

fn conv_weights<T: Scalar, R: Rng>(out: usize, inp: usize, rng: Option<&mut R>) -> Tensor<T> {
    let shape = [out, inp, KERNEL, KERNEL];
    match rng {
        Some(r) => Tensor::uniform(&shape, he_bound(inp * KERNEL * KERNEL), r),
        None => Tensor::zeros(&shape),
    }
    .param()
}

fn dense_weights<T: Scalar, R: Rng>(out: usize, inp: usize, bound: f64, rng: Option<&mut R>) -> Tensor<T> {
    match rng {
        Some(r) => Tensor::uniform(&[out, inp], bound, r),
        None => Tensor::zeros(&[out, inp]),
    }
    .param()
}

fn bias<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n]).param()
}

impl<T: Scalar> ConvTrunk<T> {
    fn build<R: Rng>(mut rng: Option<&mut R>) -> Self {
        Self {
            top_conv1_w: conv_weights(16, 1, rng.as_deref_mut()),
            top_conv1_b: bias(16),
            top_conv2_w: conv_weights(32, 16, rng.as_deref_mut()),
            top_conv2_b: bias(32),
            bot_conv1_w: conv_weights(8, 1, rng.as_deref_mut()),
            bot_conv1_b: bias(8),
            bot_conv2_w: conv_weights(16, 8, rng.as_deref_mut()),
            bot_conv2_b: bias(16),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("top_conv1.w", &self.top_conv1_w),
            ("top_conv1.b", &self.top_conv1_b),
            ("top_conv2.w", &self.top_conv2_w),
            ("top_conv2.b", &self.top_conv2_b),
            ("bot_conv1.w", &self.bot_conv1_w),
            ("bot_conv1.b", &self.bot_conv1_b),
            ("bot_conv2.w", &self.bot_conv2_w),
            ("bot_conv2.b", &self.bot_conv2_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("top_conv1.w", &mut self.top_conv1_w),
            ("top_conv1.b", &mut self.top_conv1_b),
            ("top_conv2.w", &mut self.top_conv2_w),
            ("top_conv2.b", &mut self.top_conv2_b),
            ("bot_conv1.w", &mut self.bot_conv1_w),
            ("bot_conv1.b", &mut self.bot_conv1_b),
            ("bot_conv2.w", &mut self.bot_conv2_w),
            ("bot_conv2.b", &mut self.bot_conv2_b),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams<T: Scalar = f32> {
    pub trunk: ConvTrunk<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Scalar> CnnParams<T> {
    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        Self::build(Some(rng))
    }

    pub fn zeros() -> Self {
        Self::build::<rand_chacha::ChaCha8Rng>(None)
    }

    fn build<R: Rng>(mut rng: Option<&mut R>) -> Self {
        Self {
            trunk: ConvTrunk::build(rng.as_deref_mut()),
            fc_w: dense_weights(FC_UNITS, FEATURES, he_bound(FEATURES), rng.as_deref_mut()),
            fc_b: bias(FC_UNITS),
            out_w: dense_weights(OUTPUTS, FC_UNITS, he_bound(FC_UNITS), rng.as_deref_mut()),
            out_b: bias(OUTPUTS),
        }
    }
}

impl<T: Scalar> ParamSet<T> for CnnParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = self.trunk.named();
        v.extend([
            ("fc.w", &self.fc_w),
            ("fc.b", &self.fc_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]);
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = self.trunk.named_mut();
        v.extend([
            ("fc.w", &mut self.fc_w),
            ("fc.b", &mut self.fc_b),
            ("out.w", &mut self.out_w),
            ("out.b", &mut self.out_b),
        ]);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcnnParams<T: Scalar = f32> {
    pub trunk: ConvTrunk<T>,
    /// `[4H, 1856]`, gate order input, forget, candidate, output.
    pub lstm_w_ih: Tensor<T>,
    pub lstm_w_hh: Tensor<T>,
    pub lstm_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Scalar> RcnnParams<T> {
    /// He-uniform convolution and dense weights, Glorot-uniform LSTM weights
    /// and a forget-gate bias of one.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        Self::build(Some(rng))
    }

    pub fn zeros() -> Self {
        Self::build::<rand_chacha::ChaCha8Rng>(None)
    }

    fn build<R: Rng>(mut rng: Option<&mut R>) -> Self {
        let h = LSTM_HIDDEN;
        let glorot = (6.0 / (FEATURES + h + 4 * h) as f64).sqrt();
        let trunk = ConvTrunk::build(rng.as_deref_mut());
        let lstm_w_ih = dense_weights(4 * h, FEATURES, glorot, rng.as_deref_mut());
        let lstm_w_hh = dense_weights(4 * h, h, glorot, rng.as_deref_mut());
        let mut lstm_b = bias(4 * h);
        if rng.is_some() {
            lstm_b.data_mut()[h..2 * h].fill(T::one());
        }
        Self {
            trunk,
            lstm_w_ih,
            lstm_w_hh,
            lstm_b,
            fc_w: dense_weights(FC_UNITS, h, he_bound(h), rng.as_deref_mut()),
            fc_b: bias(FC_UNITS),
            out_w: dense_weights(OUTPUTS, FC_UNITS, he_bound(FC_UNITS), rng.as_deref_mut()),
            out_b: bias(OUTPUTS),
        }
    }

    pub fn lstm_param_count(&self) -> usize {
        self.lstm_w_ih.numel() + self.lstm_w_hh.numel() + self.lstm_b.numel()
    }
}

impl<T: Scalar> ParamSet<T> for RcnnParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = self.trunk.named();
        v.extend([
            ("lstm.w_ih", &self.lstm_w_ih),
            ("lstm.w_hh", &self.lstm_w_hh),
            ("lstm.b", &self.lstm_b),
            ("fc.w", &self.fc_w),
            ("fc.b", &self.fc_b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]);
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = self.trunk.named_mut();
        v.extend([
            ("lstm.w_ih", &mut self.lstm_w_ih),
            ("lstm.w_hh", &mut self.lstm_w_hh),
            ("lstm.b", &mut self.lstm_b),
            ("fc.w", &mut self.fc_w),
            ("fc.b", &mut self.fc_b),
            ("out.w", &mut self.out_w),
            ("out.b", &mut self.out_b),
        ]);
        v
    }
}

/// Parameters placed on a tape, in [`ParamSet::named`] order.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    /// With `trainable` false the parameters enter as constants, which
    /// skips all gradient bookkeeping.
    pub fn bind<T: Scalar, P: ParamSet<T>>(tape: &mut Tape<T>, params: &P, trainable: bool) -> Self {
        let vars = params
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape(), t.data().to_vec())
                        .expect("parameter shapes are valid")
                }
            })
            .collect();
        Self { vars }
    }

    /// Adds the tape gradients of every bound parameter into the tensors.
    pub fn accumulate_grads<T: Scalar, P: ParamSet<T>>(
        &self,
        tape: &Tape<T>,
        params: &mut P,
    ) -> Result<(), TensorError> {
        for (v, (_, t)) in self.vars.iter().zip(params.named_mut()) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Pixels of frames from one camera scaled to `[0, 1]`, as `[B, 1, H, W]`
/// data.
pub fn frames_to_input<T: Scalar>(frames: &[&CameraFrame], camera: CameraId) -> Result<Vec<T>, PolicyError> {
    let (w, h) = camera.resolution();
    let mut out = Vec::with_capacity(frames.len() * w * h);
    let scale = 1.0 / 255.0;
    for f in frames {
        if f.camera != camera || f.width != w || f.height != h || f.pixels.len() != w * h {
            return Err(PolicyError::Frame(format!(
                "expected {} frame {w}x{h}, got {} {}x{}",
                camera.name(),
                f.camera.name(),
                f.width,
                f.height
            )));
        }
        out.extend(f.pixels.iter().map(|&p| T::from_f64(p as f64 * scale)));
    }
    Ok(out)
}

/// Puts a batch of frame pairs on the tape as `[B,1,120,160]` and
/// `[B,1,60,80]` constants.
pub fn frame_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    tops: &[&CameraFrame],
    bottoms: &[&CameraFrame],
) -> Result<(Var, Var), PolicyError> {
    if tops.is_empty() || tops.len() != bottoms.len() {
        return Err(PolicyError::Frame(format!(
            "{} top and {} bottom frames",
            tops.len(),
            bottoms.len()
        )));
    }
    let b = tops.len();
    let (tw, th) = CameraId::Top.resolution();
    let (bw, bh) = CameraId::Bottom.resolution();
    let top = tape.constant(&[b, 1, th, tw], frames_to_input(tops, CameraId::Top)?)?;
    let bottom = tape.constant(&[b, 1, bh, bw], frames_to_input(bottoms, CameraId::Bottom)?)?;
    Ok((top, bottom))
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    trace: &mut Option<&mut Vec<Vec<usize>>>,
) -> Result<Var, TensorError> {
    let y = tape.conv2d(x, w, b, STRIDE)?;
    if let Some(t) = trace {
        t.push(tape.shape(y).to_vec());
    }
    let y = tape.relu(y);
    let y = tape.maxpool2d(y, POOL)?;
    if let Some(t) = trace {
        t.push(tape.shape(y).to_vec());
    }
    Ok(y)
}

fn trunk_traced<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    top: Var,
    bottom: Var,
    mut top_trace: Option<&mut Vec<Vec<usize>>>,
    mut bot_trace: Option<&mut Vec<Vec<usize>>>,
) -> Result<Var, TensorError> {
    let b = tape.shape(top)[0];
    let t = conv_block(tape, top, vars[0], vars[1], &mut top_trace)?;
    let t = conv_block(tape, t, vars[2], vars[3], &mut top_trace)?;
    let u = conv_block(tape, bottom, vars[4], vars[5], &mut bot_trace)?;
    let u = conv_block(tape, u, vars[6], vars[7], &mut bot_trace)?;
    let tn = tape.value(t).len() / b;
    let un = tape.value(u).len() / b;
    let t = tape.reshape(t, &[b, tn])?;
    let u = tape.reshape(u, &[b, un])?;
    let f = tape.concat_cols(&[t, u])?;
    if tape.shape(f)[1] != FEATURES {
        return Err(crate::tensor::TensorError::Shape {
            op: "trunk",
            detail: format!("flattened {} features, expected {FEATURES}", tape.shape(f)[1]),
        });
    }
    Ok(f)
}

/// conv→ReLU→pool twice on each camera, flattened and concatenated to
/// `[B, 1856]`. `vars` are the eight trunk parameters.
pub fn trunk_forward<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], top: Var, bottom: Var) -> Result<Var, TensorError> {
    trunk_traced(tape, vars, top, bottom, None, None)
}

/// dense(128)+ReLU → dense(3), linear output.
pub(crate) fn head<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var, TensorError> {
    let y = tape.dense(x, vars[0], vars[1])?;
    let y = tape.relu(y);
    tape.dense(y, vars[2], vars[3])
}

/// Full CNN on a batch of frames on the tape; returns `[B, 3]`.
pub fn cnn_graph<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, top: Var, bottom: Var) -> Result<Var, TensorError> {
    let f = trunk_forward(tape, &bound.vars[..8], top, bottom)?;
    head(tape, &bound.vars[8..12], f)
}

/// Runs an LSTM over the rows of `feats` (`[L, 1856]`) starting from
/// `(h0, c0)` (`[1, 64]` each) and applies the head to every hidden state.
/// Returns the `[L, 3]` outputs and the final `(h, c)`.
pub fn rcnn_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    feats: Var,
    h0: Var,
    c0: Var,
) -> Result<(Var, Var, Var), TensorError> {
    let v = &bound.vars;
    let steps = tape.shape(feats)[0];
    let (mut h, mut c) = (h0, c0);
    let mut hs = Vec::with_capacity(steps);
    let xproj = tape.dense(feats, v[8], v[10])?;
    for t in 0..steps {
        let x = tape.slice_rows(xproj, t, 1)?;
        (h, c) = tape.lstm_cell(x, h, c, v[9])?;
        hs.push(h);
    }
    let hs = tape.concat_rows(&hs)?;
    let out = head(tape, &v[11..15], hs)?;
    Ok((out, h, c))
}

/// Full recurrent CNN over one window of consecutive frames, hidden state
/// starting at zero; returns `[L, 3]`.
pub fn rcnn_graph<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, top: Var, bottom: Var) -> Result<Var, TensorError> {
    let f = trunk_forward(tape, &bound.vars[..8], top, bottom)?;
    let h0 = tape.constant(&[1, LSTM_HIDDEN], vec![T::zero(); LSTM_HIDDEN])?;
    let c0 = tape.constant(&[1, LSTM_HIDDEN], vec![T::zero(); LSTM_HIDDEN])?;
    Ok(rcnn_sequence(tape, bound, f, h0, c0)?.0)
}

fn to_command<T: Scalar>(v: &[T]) -> SpeedCommand {
    SpeedCommand {
        forward: v[0].as_f64(),
        left: v[1].as_f64(),
        turn: v[2].as_f64(),
    }
}

/// Raw (unclamped) CNN output for one frame pair.
pub fn cnn_forward<T: Scalar>(p: &CnnParams<T>, top: &CameraFrame, bottom: &CameraFrame) -> Result<SpeedCommand, PolicyError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, p, false);
    let (t, b) = frame_inputs(&mut tape, &[top], &[bottom])?;
    let out = cnn_graph(&mut tape, &bound, t, b)?;
    Ok(to_command(tape.value(out)))
}

/// Raw CNN outputs for a batch of frame pairs.
pub fn cnn_forward_batch(
    p: &CnnParams<f32>,
    tops: &[&CameraFrame],
    bottoms: &[&CameraFrame],
) -> Result<Vec<[f32; 3]>, PolicyError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, p, false);
    let (t, b) = frame_inputs(&mut tape, tops, bottoms)?;
    let out = cnn_graph(&mut tape, &bound, t, b)?;
    Ok(tape
        .value(out)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// One recurrent step: returns the raw command and the next `(h, c)`.
pub fn rcnn_forward<T: Scalar>(
    p: &RcnnParams<T>,
    top: &CameraFrame,
    bottom: &CameraFrame,
    h: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<(SpeedCommand, Tensor<T>, Tensor<T>), PolicyError> {
    for s in [h, c] {
        if s.numel() != LSTM_HIDDEN {
            return Err(TensorError::Shape {
                op: "rcnn_forward",
                detail: format!("hidden state shape {:?}", s.shape()),
            }
            .into());
        }
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, p, false);
    let (t, b) = frame_inputs(&mut tape, &[top], &[bottom])?;
    let f = trunk_forward(&mut tape, &bound.vars[..8], t, b)?;
    let h0 = tape.constant(&[1, LSTM_HIDDEN], h.data().to_vec())?;
    let c0 = tape.constant(&[1, LSTM_HIDDEN], c.data().to_vec())?;
    let (out, h1, c1) = rcnn_sequence(&mut tape, &bound, f, h0, c0)?;
    let hn = Tensor::new(&[LSTM_HIDDEN], tape.value(h1).to_vec())?;
    let cn = Tensor::new(&[LSTM_HIDDEN], tape.value(c1).to_vec())?;
    Ok((to_command(tape.value(out)), hn, cn))
}

/// Per-layer activation shapes as `channels × width × height`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeChain {
    pub top: Vec<[usize; 3]>,
    pub bottom: Vec<[usize; 3]>,
    pub flattened: usize,
}

/// Traces the trunk on blank frames and reports every conv and pool output.
pub fn cnn_shape_chain() -> ShapeChain {
    let p = CnnParams::<f32>::zeros();
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &p, false);
    let top = CameraFrame::blank(CameraId::Top, 0);
    let bottom = CameraFrame::blank(CameraId::Bottom, 0);
    let (t, b) = frame_inputs(&mut tape, &[&top], &[&bottom]).expect("blank frames");
    let (mut ts, mut bs) = (vec![], vec![]);
    let f = trunk_traced(&mut tape, &bound.vars[..8], t, b, Some(&mut ts), Some(&mut bs))
        .expect("trunk shapes");
    let cwh = |v: Vec<Vec<usize>>| v.into_iter().map(|s| [s[1], s[3], s[2]]).collect();
    ShapeChain {
        top: cwh(ts),
        bottom: cwh(bs),
        flattened: tape.shape(f)[1],
    }
}
