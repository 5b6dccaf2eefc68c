//! Stacked LSTM over per-frame features, with peephole gates and a shared
//! per-frame softmax classifier, plus the plain sigmoid RNN baseline. The
//! gate recurrence is
//!
//!   i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + w_ci . c_{t-1} + b_i)
//!   f_t = sigmoid(W_xf x_t + W_hf h_{t-1} + w_cf . c_{t-1} + b_f)
//!   c_t = f_t . c_{t-1} + i_t . tanh(W_xc x_t + W_hc h_{t-1} + b_c)
//!   o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + w_co . c_t + b_o)
//!   h_t = o_t . tanh(c_t)
//!
//! where the output gate's peephole reads the current cell. Peepholes are
//! diagonal (vectors), the Graves convention.

use crate::error::{Error, Result};
use crate::params::{uniform_tensor, ParamSet};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Stack geometry. The full-scale reference is five layers of 512 cells;
/// desk-scale defaults are two layers of 32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackSpec {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl StackSpec {
    pub fn desk(input_size: usize, num_classes: usize) -> StackSpec {
        StackSpec {
            num_layers: 2,
            hidden_size: 32,
            num_classes,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_classes == 0 || self.input_size == 0 {
            return Err(Error::Parameter(format!(
                "stack spec fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-layer hidden and cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(spec: &StackSpec) -> LstmState {
        LstmState {
            h: vec![vec![0.0; spec.hidden_size]; spec.num_layers],
            c: vec![vec![0.0; spec.hidden_size]; spec.num_layers],
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "c", "o"];
const INIT_BOUND: f64 = 0.08;

/// Create stack parameters under `prefix`: gate matrices, diagonal peepholes
/// and biases per layer plus the shared softmax head. Everything is uniform
/// in [-0.08, 0.08] except the forget bias, which starts at +1 so the cell
/// path is open early in training.
pub fn init_params<R: Rng>(spec: &StackSpec, prefix: &str, params: &mut ParamSet, rng: &mut R) -> Result<()> {
    spec.validate()?;
    let n = spec.hidden_size;
    for layer in 0..spec.num_layers {
        let in_w = if layer == 0 { spec.input_size } else { n };
        for gate in GATES {
            params.insert(
                &format!("{prefix}.l{layer}.w_x{gate}"),
                uniform_tensor(&[n, in_w], INIT_BOUND, rng),
            );
            params.insert(
                &format!("{prefix}.l{layer}.w_h{gate}"),
                uniform_tensor(&[n, n], INIT_BOUND, rng),
            );
            let bias = if gate == "f" {
                Tensor::new(vec![n], vec![1.0; n]).unwrap()
            } else {
                uniform_tensor(&[n], INIT_BOUND, rng)
            };
            params.insert(&format!("{prefix}.l{layer}.b_{gate}"), bias);
        }
        for peep in ["i", "f", "o"] {
            params.insert(
                &format!("{prefix}.l{layer}.w_c{peep}"),
                uniform_tensor(&[n], INIT_BOUND, rng),
            );
        }
    }
    params.insert(
        &format!("{prefix}.softmax.w"),
        uniform_tensor(&[spec.num_classes, n], INIT_BOUND, rng),
    );
    params.insert(&format!("{prefix}.softmax.b"), Tensor::zeros(&[spec.num_classes]));
    Ok(())
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub w_xc: Var,
    pub w_hc: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub w_ci: Var,
    pub w_cf: Var,
    pub w_co: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_c: Var,
    pub b_o: Var,
}

pub fn register_layer_vars(tape: &mut Tape, prefix: &str, layer: usize, params: &ParamSet) -> Result<LstmLayerVars> {
    let mut get = |suffix: &str| -> Result<Var> {
        let name = format!("{prefix}.l{layer}.{suffix}");
        tape.param(&name, params.get(&name)?)
    };
    Ok(LstmLayerVars {
        w_xi: get("w_xi")?,
        w_hi: get("w_hi")?,
        w_xf: get("w_xf")?,
        w_hf: get("w_hf")?,
        w_xc: get("w_xc")?,
        w_hc: get("w_hc")?,
        w_xo: get("w_xo")?,
        w_ho: get("w_ho")?,
        w_ci: get("w_ci")?,
        w_cf: get("w_cf")?,
        w_co: get("w_co")?,
        b_i: get("b_i")?,
        b_f: get("b_f")?,
        b_c: get("b_c")?,
        b_o: get("b_o")?,
    })
}

/// One LSTM step. Returns (h_t, c_t).
pub fn lstm_cell_step(
    tape: &mut Tape,
    x: Var,
    state: (Var, Var),
    vars: &LstmLayerVars,
) -> Result<(Var, Var)> {
    let (h_prev, c_prev) = state;
    let gate_pre = |tape: &mut Tape, wx, wh, peep: Option<Var>, b| -> Result<Var> {
        let a = tape.affine(wx, x, b)?;
        let r = tape.matvec(wh, h_prev)?;
        let mut pre = tape.add(a, r)?;
        if let Some(w_c) = peep {
            let p = tape.mul(w_c, c_prev)?;
            pre = tape.add(pre, p)?;
        }
        Ok(pre)
    };
    let i_pre = gate_pre(tape, vars.w_xi, vars.w_hi, Some(vars.w_ci), vars.b_i)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = gate_pre(tape, vars.w_xf, vars.w_hf, Some(vars.w_cf), vars.b_f)?;
    let f = tape.sigmoid(f_pre)?;
    let g_pre = gate_pre(tape, vars.w_xc, vars.w_hc, None, vars.b_c)?;
    let g = tape.tanh(g_pre)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    // Output gate peephole reads the *current* cell.
    let o_a = tape.affine(vars.w_xo, x, vars.b_o)?;
    let o_r = tape.matvec(vars.w_ho, h_prev)?;
    let o_sum = tape.add(o_a, o_r)?;
    let o_p = tape.mul(vars.w_co, c)?;
    let o_pre = tape.add(o_sum, o_p)?;
    let o = tape.sigmoid(o_pre)?;
    let c_tanh = tape.tanh(c)?;
    let h = tape.mul(o, c_tanh)?;
    Ok((h, c))
}

/// Plain RNN baseline: h_t = sigmoid(W_ih x + W_hh h_{t-1} + b_h),
/// y_t = W_ho h_t + b_o.
pub struct RnnVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_h: Var,
    pub w_ho: Var,
    pub b_o: Var,
}

pub fn rnn_cell_step(tape: &mut Tape, x: Var, h_prev: Var, vars: &RnnVars) -> Result<(Var, Var)> {
    let a = tape.affine(vars.w_ih, x, vars.b_h)?;
    let r = tape.matvec(vars.w_hh, h_prev)?;
    let pre = tape.add(a, r)?;
    let h = tape.sigmoid(pre)?;
    let y = tape.affine(vars.w_ho, h, vars.b_o)?;
    Ok((h, y))
}

/// Run the stack over a feature sequence. Conv-map features are flattened;
/// layer l consumes layer l-1's hidden sequence; the shared softmax affine
/// maps the top layer's h_t to per-frame logits.
pub fn stack_forward(
    tape: &mut Tape,
    features: &[Var],
    spec: &StackSpec,
    prefix: &str,
    params: &ParamSet,
    initial: Option<&LstmState>,
) -> Result<Vec<Var>> {
    spec.validate()?;
    if features.is_empty() {
        return Err(Error::Parameter("stack_forward: empty feature sequence".into()));
    }
    let layer_vars: Vec<LstmLayerVars> = (0..spec.num_layers)
        .map(|l| register_layer_vars(tape, prefix, l, params))
        .collect::<Result<_>>()?;
    let w_sm = tape.param(
        &format!("{prefix}.softmax.w"),
        params.get(&format!("{prefix}.softmax.w"))?,
    )?;
    let b_sm = tape.param(
        &format!("{prefix}.softmax.b"),
        params.get(&format!("{prefix}.softmax.b"))?,
    )?;

    let zero_state = LstmState::zeros(spec);
    let init = initial.unwrap_or(&zero_state);
    if init.h.len() != spec.num_layers || init.c.len() != spec.num_layers {
        return Err(Error::Dimension(format!(
            "initial state has {} layers, spec wants {}",
            init.h.len(),
            spec.num_layers
        )));
    }
    let mut states: Vec<(Var, Var)> = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let h0 = tape.constant(vec![spec.hidden_size], init.h[l].clone())?;
        let c0 = tape.constant(vec![spec.hidden_size], init.c[l].clone())?;
        states.push((h0, c0));
    }

    let mut logits = Vec::with_capacity(features.len());
    for &feat in features {
        let mut x = tape.flatten(feat)?;
        if tape.shape(x)[0] != spec.input_size {
            return Err(Error::Dimension(format!(
                "stack_forward: feature width {} does not match input_size {}",
                tape.shape(x)[0],
                spec.input_size
            )));
        }
        for (l, vars) in layer_vars.iter().enumerate() {
            let (h, c) = lstm_cell_step(tape, x, states[l], vars)?;
            states[l] = (h, c);
            x = h;
        }
        logits.push(tape.affine(w_sm, x, b_sm)?);
    }
    Ok(logits)
}

/// Per-frame label backpropagation: loss = sum_t g_t * CE(logits_t, label).
/// Scaling the per-frame loss term realizes a per-frame gradient gain exactly,
/// because gradients are linear in the loss coefficients.
pub fn lstm_loss(tape: &mut Tape, per_frame_logits: &[Var], label: usize, gain: &[f64]) -> Result<Var> {
    if per_frame_logits.is_empty() {
        return Err(Error::Parameter("lstm_loss: empty logits list".into()));
    }
    if gain.len() != per_frame_logits.len() {
        return Err(Error::Dimension(format!(
            "lstm_loss: gain length {} != {} frames",
            gain.len(),
            per_frame_logits.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&logits, &g) in per_frame_logits.iter().zip(gain) {
        let ce = tape.softmax_cross_entropy(logits, label)?;
        let term = tape.scale(ce, g)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::stable_sigmoid;

    fn spec(input: usize, hidden: usize, layers: usize, classes: usize) -> StackSpec {
        StackSpec {
            num_layers: layers,
            hidden_size: hidden,
            num_classes: classes,
            input_size: input,
        }
    }

    fn zero_layer_params(prefix: &str, layer: usize, n: usize, in_w: usize, params: &mut ParamSet) {
        for gate in GATES {
            params.insert(&format!("{prefix}.l{layer}.w_x{gate}"), Tensor::zeros(&[n, in_w]));
            params.insert(&format!("{prefix}.l{layer}.w_h{gate}"), Tensor::zeros(&[n, n]));
            params.insert(&format!("{prefix}.l{layer}.b_{gate}"), Tensor::zeros(&[n]));
        }
        for peep in ["i", "f", "o"] {
            params.insert(&format!("{prefix}.l{layer}.w_c{peep}"), Tensor::zeros(&[n]));
        }
    }

    /// Scalar-loop oracle evaluating the gate equations elementwise.
    #[allow(clippy::too_many_arguments)]
    fn scalar_cell_oracle(
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        params: &ParamSet,
        prefix: &str,
        layer: usize,
        n: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let get = |s: &str| params.get(&format!("{prefix}.l{layer}.{s}")).unwrap().data().to_vec();
        let (w_xi, w_hi, b_i) = (get("w_xi"), get("w_hi"), get("b_i"));
        let (w_xf, w_hf, b_f) = (get("w_xf"), get("w_hf"), get("b_f"));
        let (w_xc, w_hc, b_c) = (get("w_xc"), get("w_hc"), get("b_c"));
        let (w_xo, w_ho, b_o) = (get("w_xo"), get("w_ho"), get("b_o"));
        let (w_ci, w_cf, w_co) = (get("w_ci"), get("w_cf"), get("w_co"));
        let in_w = x.len();
        let dot = |w: &[f64], v: &[f64], row: usize, width: usize| -> f64 {
            (0..width).map(|j| w[row * width + j] * v[j]).sum()
        };
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; n];
        for e in 0..n {
            let i = stable_sigmoid(
                dot(&w_xi, x, e, in_w) + dot(&w_hi, h_prev, e, n) + w_ci[e] * c_prev[e] + b_i[e],
            );
            let f = stable_sigmoid(
                dot(&w_xf, x, e, in_w) + dot(&w_hf, h_prev, e, n) + w_cf[e] * c_prev[e] + b_f[e],
            );
            let g = (dot(&w_xc, x, e, in_w) + dot(&w_hc, h_prev, e, n) + b_c[e]).tanh();
            c[e] = f * c_prev[e] + i * g;
            let o = stable_sigmoid(
                dot(&w_xo, x, e, in_w) + dot(&w_ho, h_prev, e, n) + w_co[e] * c[e] + b_o[e],
            );
            h[e] = o * c[e].tanh();
        }
        (h, c)
    }

    fn run_cell(
        params: &ParamSet,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = register_layer_vars(&mut tape, "lstm", 0, params).unwrap();
        let vx = tape.constant(vec![x.len()], x.to_vec()).unwrap();
        let vh = tape.constant(vec![h_prev.len()], h_prev.to_vec()).unwrap();
        let vc = tape.constant(vec![c_prev.len()], c_prev.to_vec()).unwrap();
        let (h, c) = lstm_cell_step(&mut tape, vx, (vh, vc), &vars).unwrap();
        (tape.value(h).to_vec(), tape.value(c).to_vec())
    }

    #[test]
    fn zero_parameter_cell_halves_the_cell() {
        let n = 4;
        let mut params = ParamSet::new();
        zero_layer_params("lstm", 0, n, 3, &mut params);
        let c0 = [0.8, -0.4, 0.2, 1.5];
        let (h, c) = run_cell(&params, &[0.0; 3], &[0.0; 4], &c0);
        for e in 0..n {
            assert!((c[e] - 0.5 * c0[e]).abs() < 1e-15);
            assert!((h[e] - 0.5 * (0.5 * c0[e]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gates_preserve_the_cell() {
        let n = 3;
        let mut params = ParamSet::new();
        zero_layer_params("lstm", 0, n, 2, &mut params);
        params.insert("lstm.l0.b_f", Tensor::new(vec![n], vec![20.0; n]).unwrap());
        params.insert("lstm.l0.b_i", Tensor::new(vec![n], vec![-20.0; n]).unwrap());
        let c0 = [0.9, -0.7, 0.3];
        let (_, c) = run_cell(&params, &[0.0; 2], &[0.0; 3], &c0);
        for e in 0..n {
            assert!((c[e] - c0[e]).abs() < 1e-8, "{} vs {}", c[e], c0[e]);
        }
    }

    #[test]
    fn memory_survives_one_hundred_saturated_steps() {
        let n = 3;
        let mut params = ParamSet::new();
        zero_layer_params("lstm", 0, n, 2, &mut params);
        params.insert("lstm.l0.b_f", Tensor::new(vec![n], vec![20.0; n]).unwrap());
        params.insert("lstm.l0.b_i", Tensor::new(vec![n], vec![-20.0; n]).unwrap());
        let c0 = [0.9, -0.7, 0.3];
        let mut c = c0.to_vec();
        let mut h = vec![0.0; n];
        for _ in 0..100 {
            let (h1, c1) = run_cell(&params, &[0.1, -0.2], &h, &c);
            h = h1;
            c = c1;
        }
        for e in 0..n {
            assert!((c[e] - c0[e]).abs() < 1e-6, "{} vs {}", c[e], c0[e]);
        }
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = substream(41, "lstm-test");
        let spec = spec(5, 3, 1, 2);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut rng).unwrap();
        for trial in 0..50 {
            let mut r = substream(trial, "lstm-io");
            let x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
            let h_prev: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let c_prev: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (h, c) = run_cell(&params, &x, &h_prev, &c_prev);
            let (oh, oc) = scalar_cell_oracle(&x, &h_prev, &c_prev, &params, "lstm", 0, 3);
            for e in 0..3 {
                assert!((h[e] - oh[e]).abs() < 1e-12);
                assert!((c[e] - oc[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rnn_cell_zero_params_give_half() {
        let mut params = ParamSet::new();
        params.insert("rnn.w_ih", Tensor::zeros(&[3, 2]));
        params.insert("rnn.w_hh", Tensor::zeros(&[3, 3]));
        params.insert("rnn.b_h", Tensor::zeros(&[3]));
        params.insert("rnn.w_ho", Tensor::zeros(&[2, 3]));
        params.insert("rnn.b_o", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let vars = RnnVars {
            w_ih: tape.param("rnn.w_ih", params.get("rnn.w_ih").unwrap()).unwrap(),
            w_hh: tape.param("rnn.w_hh", params.get("rnn.w_hh").unwrap()).unwrap(),
            b_h: tape.param("rnn.b_h", params.get("rnn.b_h").unwrap()).unwrap(),
            w_ho: tape.param("rnn.w_ho", params.get("rnn.w_ho").unwrap()).unwrap(),
            b_o: tape.param("rnn.b_o", params.get("rnn.b_o").unwrap()).unwrap(),
        };
        let x = tape.constant(vec![2], vec![0.4, -0.6]).unwrap();
        let h_prev = tape.constant(vec![3], vec![0.3, 0.1, -0.9]).unwrap();
        let (h, y) = rnn_cell_step(&mut tape, x, h_prev, &vars).unwrap();
        assert_eq!(tape.value(h), &[0.5, 0.5, 0.5]);
        assert_eq!(tape.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn rnn_with_zero_recurrence_ignores_history() {
        let mut rng = substream(4, "rnn");
        let mut params = ParamSet::new();
        params.insert("rnn.w_ih", uniform_tensor(&[3, 2], 0.5, &mut rng));
        params.insert("rnn.w_hh", Tensor::zeros(&[3, 3]));
        params.insert("rnn.b_h", uniform_tensor(&[3], 0.5, &mut rng));
        params.insert("rnn.w_ho", uniform_tensor(&[2, 3], 0.5, &mut rng));
        params.insert("rnn.b_o", uniform_tensor(&[2], 0.5, &mut rng));
        let run = |h_prev: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = RnnVars {
                w_ih: tape.param("rnn.w_ih", params.get("rnn.w_ih").unwrap()).unwrap(),
                w_hh: tape.param("rnn.w_hh", params.get("rnn.w_hh").unwrap()).unwrap(),
                b_h: tape.param("rnn.b_h", params.get("rnn.b_h").unwrap()).unwrap(),
                w_ho: tape.param("rnn.w_ho", params.get("rnn.w_ho").unwrap()).unwrap(),
                b_o: tape.param("rnn.b_o", params.get("rnn.b_o").unwrap()).unwrap(),
            };
            let x = tape.constant(vec![2], vec![0.4, -0.6]).unwrap();
            let hp = tape.constant(vec![3], h_prev).unwrap();
            let (h, _) = rnn_cell_step(&mut tape, x, hp, &vars).unwrap();
            tape.value(h).to_vec()
        };
        assert_eq!(run(vec![0.0; 3]), run(vec![0.9, -0.8, 0.7]));
    }

    #[test]
    fn rnn_cell_matches_scalar_oracle() {
        let mut rng = substream(10, "rnn-oracle");
        let mut params = ParamSet::new();
        params.insert("rnn.w_ih", uniform_tensor(&[3, 2], 0.7, &mut rng));
        params.insert("rnn.w_hh", uniform_tensor(&[3, 3], 0.7, &mut rng));
        params.insert("rnn.b_h", uniform_tensor(&[3], 0.7, &mut rng));
        params.insert("rnn.w_ho", uniform_tensor(&[2, 3], 0.7, &mut rng));
        params.insert("rnn.b_o", uniform_tensor(&[2], 0.7, &mut rng));
        let x = [0.2, -0.5];
        let h_prev = [0.1, 0.6, -0.3];
        let mut tape = Tape::new();
        let vars = RnnVars {
            w_ih: tape.param("rnn.w_ih", params.get("rnn.w_ih").unwrap()).unwrap(),
            w_hh: tape.param("rnn.w_hh", params.get("rnn.w_hh").unwrap()).unwrap(),
            b_h: tape.param("rnn.b_h", params.get("rnn.b_h").unwrap()).unwrap(),
            w_ho: tape.param("rnn.w_ho", params.get("rnn.w_ho").unwrap()).unwrap(),
            b_o: tape.param("rnn.b_o", params.get("rnn.b_o").unwrap()).unwrap(),
        };
        let vx = tape.constant(vec![2], x.to_vec()).unwrap();
        let vh = tape.constant(vec![3], h_prev.to_vec()).unwrap();
        let (h, y) = rnn_cell_step(&mut tape, vx, vh, &vars).unwrap();
        let w_ih = params.get("rnn.w_ih").unwrap().data();
        let w_hh = params.get("rnn.w_hh").unwrap().data();
        let b_h = params.get("rnn.b_h").unwrap().data();
        let w_ho = params.get("rnn.w_ho").unwrap().data();
        let b_o = params.get("rnn.b_o").unwrap().data();
        let mut oh = [0.0; 3];
        for e in 0..3 {
            let pre = (0..2).map(|j| w_ih[e * 2 + j] * x[j]).sum::<f64>()
                + (0..3).map(|j| w_hh[e * 3 + j] * h_prev[j]).sum::<f64>()
                + b_h[e];
            oh[e] = stable_sigmoid(pre);
        }
        for e in 0..3 {
            assert!((tape.value(h)[e] - oh[e]).abs() < 1e-12);
        }
        for k in 0..2 {
            let oy = (0..3).map(|j| w_ho[k * 3 + j] * oh[j]).sum::<f64>() + b_o[k];
            assert!((tape.value(y)[k] - oy).abs() < 1e-12);
        }
    }

    fn feature_vars(tape: &mut Tape, seq: &[Vec<f64>]) -> Vec<Var> {
        seq.iter()
            .map(|x| tape.constant(vec![x.len()], x.clone()).unwrap())
            .collect()
    }

    #[test]
    fn single_step_stack_equals_manual_cell_composition() {
        let spec = spec(4, 3, 2, 5);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(7, "init")).unwrap();
        let x = vec![0.3, -0.2, 0.9, 0.1];

        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &[x.clone()]);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
        assert_eq!(logits.len(), 1);

        let (h0, c0) = scalar_cell_oracle(&x, &[0.0; 3], &[0.0; 3], &params, "lstm", 0, 3);
        let _ = c0;
        let (h1, _) = scalar_cell_oracle(&h0, &[0.0; 3], &[0.0; 3], &params, "lstm", 1, 3);
        let w = params.get("lstm.softmax.w").unwrap().data();
        let b = params.get("lstm.softmax.b").unwrap().data();
        for k in 0..5 {
            let want = (0..3).map(|j| w[k * 3 + j] * h1[j]).sum::<f64>() + b[k];
            assert!((tape.value(logits[0])[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_matches_step_by_step_oracle() {
        let spec = spec(4, 3, 2, 5);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(9, "init")).unwrap();
        let mut r = substream(12, "seq");
        let seq: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &seq);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();

        let mut h = vec![vec![0.0; 3]; 2];
        let mut c = vec![vec![0.0; 3]; 2];
        let w = params.get("lstm.softmax.w").unwrap().data();
        let b = params.get("lstm.softmax.b").unwrap().data();
        for (t, x) in seq.iter().enumerate() {
            let mut input = x.clone();
            for l in 0..2 {
                let (nh, nc) = scalar_cell_oracle(&input, &h[l], &c[l], &params, "lstm", l, 3);
                h[l] = nh.clone();
                c[l] = nc;
                input = nh;
            }
            for k in 0..5 {
                let want = (0..3).map(|j| w[k * 3 + j] * h[1][j]).sum::<f64>() + b[k];
                assert!((tape.value(logits[t])[k] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reversing_a_sequence_changes_final_logits() {
        let spec = spec(3, 4, 2, 3);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(21, "init")).unwrap();
        let mut r = substream(22, "seq");
        let seq: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut rev = seq.clone();
        rev.reverse();

        let run = |s: &[Vec<f64>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let feats = feature_vars(&mut tape, s);
            let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
            tape.value(*logits.last().unwrap()).to_vec()
        };
        let a = run(&seq);
        let b = run(&rev);
        let max_diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-9, "order sensitivity too weak: {max_diff}");
    }

    #[test]
    fn loss_with_unit_gain_is_plain_sum() {
        let spec = spec(2, 3, 1, 4);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(31, "init")).unwrap();
        let mut r = substream(32, "seq");
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &seq);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
        let loss = lstm_loss(&mut tape, &logits, 1, &[1.0, 1.0, 1.0]).unwrap();
        let mut want = 0.0;
        for &l in &logits {
            let mut t2 = Tape::new();
            let lv = t2.constant(vec![4], tape.value(l).to_vec()).unwrap();
            let ce = t2.softmax_cross_entropy(lv, 1).unwrap();
            want += t2.scalar_value(ce);
        }
        assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn one_hot_gain_keeps_only_the_last_frame() {
        let spec = spec(2, 3, 1, 4);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(33, "init")).unwrap();
        let mut r = substream(34, "seq");
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &seq);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
        let loss = lstm_loss(&mut tape, &logits, 2, &[0.0, 0.0, 1.0]).unwrap();
        let mut t2 = Tape::new();
        let last = t2
            .constant(vec![4], tape.value(logits[2]).to_vec())
            .unwrap();
        let ce = t2.softmax_cross_entropy(last, 2).unwrap();
        assert!((tape.scalar_value(loss) - t2.scalar_value(ce)).abs() < 1e-12);
    }

    #[test]
    fn gain_scales_per_frame_logit_gradients() {
        // d loss / d logits_t = g_t * (softmax(logits_t) - onehot), checked
        // against finite differences through the whole stack.
        let spec = spec(2, 3, 1, 3);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(35, "init")).unwrap();
        let mut r = substream(36, "seq");
        let seq: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let gain = crate::train::gain_schedule(5).unwrap();
        let label = 1usize;

        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &seq);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
        let loss = lstm_loss(&mut tape, &logits, label, &gain).unwrap();
        tape.backward(loss).unwrap();

        for (t, &lv) in logits.iter().enumerate() {
            let logit_vals = tape.value(lv).to_vec();
            let m = logit_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logit_vals.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let got = tape.grad(lv).unwrap();
            for k in 0..3 {
                let want = gain[t] * (exps[k] / z - if k == label { 1.0 } else { 0.0 });
                assert!((got[k] - want).abs() < 1e-10, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn cell_and_hidden_bounds_hold_on_random_rollouts() {
        let spec = spec(4, 6, 1, 2);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(50, "init")).unwrap();
        let mut r = substream(51, "roll");
        let mut h = vec![0.0; 6];
        let mut c = vec![0.0; 6];
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (nh, nc) = run_cell(&params, &x, &h, &c);
            for e in 0..6 {
                assert!(nc[e].abs() <= c[e].abs() + 1.0 + 1e-12, "cell bound");
                assert!(nh[e].abs() < 1.0, "hidden bound");
            }
            h = nh;
            c = nc;
        }
    }

    #[test]
    fn parameter_count_is_independent_of_sequence_length() {
        let spec = spec(4, 3, 2, 5);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(60, "init")).unwrap();
        let before = params.total_values();
        for t in [1usize, 3, 8] {
            let mut r = substream(t as u64, "seq");
            let seq: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut tape = Tape::new();
            let feats = feature_vars(&mut tape, &seq);
            stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
            assert_eq!(params.total_values(), before);
        }
    }

    #[test]
    fn micro_stack_passes_finite_difference_check() {
        // 2 layers, N_h=4, T=3, including peepholes.
        let spec = spec(3, 4, 2, 3);
        let mut params = ParamSet::new();
        init_params(&spec, "lstm", &mut params, &mut substream(70, "init")).unwrap();
        let mut r = substream(71, "seq");
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let gain = crate::train::gain_schedule(3).unwrap();

        let eval = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let feats = feature_vars(&mut tape, &seq);
            let logits = stack_forward(&mut tape, &feats, &spec, "lstm", p, None).unwrap();
            let loss = lstm_loss(&mut tape, &logits, 1, &gain).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let feats = feature_vars(&mut tape, &seq);
        let logits = stack_forward(&mut tape, &feats, &spec, "lstm", &params, None).unwrap();
        let loss = lstm_loss(&mut tape, &logits, 1, &gain).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = params.clone();
        tape.accumulate_grads_into(&mut grads).unwrap();

        let h = 1e-5;
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let n = params.get(&name).unwrap().numel();
            for i in 0..n {
                let mut plus = params.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let g = grads.get(&name).unwrap().grad().unwrap()[i];
                let rel = (g - fd).abs() / 1.0f64.max(g.abs()).max(fd.abs());
                assert!(rel < 1e-4, "{name}[{i}]: {g} vs {fd}");
            }
        }
    }
}
