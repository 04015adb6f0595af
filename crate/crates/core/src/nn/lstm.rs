//! One masked LSTM layer over a time-major batch.
//!
//! Inputs and outputs are `(T * B) x D` matrices where row `t * B + b` holds
//! timestep `t` of sample `b`. Sample `b` is valid for `t < valid_len[b]`; at
//! later steps the state is carried through unchanged, so the final output row
//! of a sample is its hidden state at the last valid step.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};

use super::activation::{sigmoid_inplace, tanh_inplace};
use super::params::{sum_rows, LstmWeights};

/// Values saved by the forward pass for backpropagation.
pub struct LstmCache {
    inputs: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates `[i | f | g | o]`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Runs the layer. Returns the hidden state at every timestep and, if asked,
/// the cache for [`backward`].
pub fn forward(
    w: &LstmWeights,
    inputs: Array2<f64>,
    valid_len: &[usize],
    keep_cache: bool,
) -> (Array2<f64>, Option<LstmCache>) {
    let batch = valid_len.len();
    let steps = inputs.nrows() / batch;
    let units = w.units();
    let mut pre = inputs.dot(&w.w_input);
    pre += &w.bias;

    let mut h = Array2::<f64>::zeros((batch, units));
    let mut c = Array2::<f64>::zeros((batch, units));
    let mut outputs = Array2::<f64>::zeros((steps * batch, units));
    let (mut h_prev_all, mut c_prev_all, mut gates_all, mut tanh_c_all) = if keep_cache {
        (
            Array2::zeros((steps * batch, units)),
            Array2::zeros((steps * batch, units)),
            Array2::zeros((steps * batch, 4 * units)),
            Array2::zeros((steps * batch, units)),
        )
    } else {
        (
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
            Array2::zeros((0, 0)),
        )
    };

    let mut tc_buf = vec![0.0; units];
    for t in 0..steps {
        let rows = t * batch..(t + 1) * batch;
        let mut z = pre.slice(s![rows.clone(), ..]).to_owned();
        general_mat_mul(1.0, &h, &w.w_recurrent, 1.0, &mut z);
        if keep_cache {
            h_prev_all.slice_mut(s![rows.clone(), ..]).assign(&h);
            c_prev_all.slice_mut(s![rows.clone(), ..]).assign(&c);
        }
        for b in 0..batch {
            if t >= valid_len[b] {
                continue;
            }
            let mut zr = z.row_mut(b);
            let zr = zr.as_slice_mut().expect("contiguous row");
            let (ifg, go) = zr.split_at_mut(3 * units);
            let (gi_f, gg) = ifg.split_at_mut(2 * units);
            sigmoid_inplace(gi_f);
            tanh_inplace(gg);
            sigmoid_inplace(go);
            let (gi, gf) = gi_f.split_at(units);
            let mut cr = c.row_mut(b);
            let cr = cr.as_slice_mut().expect("contiguous row");
            for k in 0..units {
                cr[k] = gf[k] * cr[k] + gi[k] * gg[k];
            }
            tc_buf.copy_from_slice(cr);
            tanh_inplace(&mut tc_buf);
            let mut hr = h.row_mut(b);
            let hr = hr.as_slice_mut().expect("contiguous row");
            for k in 0..units {
                hr[k] = go[k] * tc_buf[k];
            }
            if keep_cache {
                tanh_c_all
                    .row_mut(t * batch + b)
                    .as_slice_mut()
                    .expect("contiguous row")
                    .copy_from_slice(&tc_buf);
            }
        }
        if keep_cache {
            gates_all.slice_mut(s![rows.clone(), ..]).assign(&z);
        }
        outputs.slice_mut(s![rows, ..]).assign(&h);
    }

    let cache = keep_cache.then(|| LstmCache {
        inputs,
        h_prev: h_prev_all,
        c_prev: c_prev_all,
        gates: gates_all,
        tanh_c: tanh_c_all,
    });
    (outputs, cache)
}

/// Backpropagation through time.
///
/// `d_outputs` is the loss gradient with respect to each output row. Parameter
/// gradients are accumulated into `grads`; the gradient with respect to the
/// layer inputs is returned. Rows of invalid timesteps get zero input gradient.
pub fn backward(
    w: &LstmWeights,
    cache: &LstmCache,
    valid_len: &[usize],
    d_outputs: ArrayView2<f64>,
    grads: &mut LstmWeights,
) -> Array2<f64> {
    let batch = valid_len.len();
    let steps = cache.inputs.nrows() / batch;
    let units = w.units();
    let mut dz_all = Array2::<f64>::zeros((steps * batch, 4 * units));
    let mut dh = Array2::<f64>::zeros((batch, units));
    let mut dc = Array2::<f64>::zeros((batch, units));
    let mut dh_prev = Array2::<f64>::zeros((batch, units));

    for t in (0..steps).rev() {
        let rows = t * batch..(t + 1) * batch;
        dh += &d_outputs.slice(s![rows.clone(), ..]);
        for b in 0..batch {
            if t >= valid_len[b] {
                continue;
            }
            let r = t * batch + b;
            let gates = cache.gates.row(r);
            let c_prev = cache.c_prev.row(r);
            let tc = cache.tanh_c.row(r);
            let mut dz = dz_all.row_mut(r);
            let mut dcr = dc.row_mut(b);
            let dhr = dh.row(b);
            for k in 0..units {
                let (i, f, g, o) = (gates[k], gates[units + k], gates[2 * units + k], gates[3 * units + k]);
                let d_o = dhr[k] * tc[k];
                let d_c = dcr[k] + dhr[k] * o * (1.0 - tc[k] * tc[k]);
                dz[k] = d_c * g * i * (1.0 - i);
                dz[units + k] = d_c * c_prev[k] * f * (1.0 - f);
                dz[2 * units + k] = d_c * i * (1.0 - g * g);
                dz[3 * units + k] = d_o * o * (1.0 - o);
                dcr[k] = d_c * f;
            }
        }
        let dz_t = dz_all.slice(s![rows, ..]);
        general_mat_mul(1.0, &dz_t, &w.w_recurrent.t(), 0.0, &mut dh_prev);
        for b in 0..batch {
            if t < valid_len[b] {
                dh.row_mut(b).assign(&dh_prev.row(b));
            }
        }
    }

    general_mat_mul(1.0, &cache.inputs.t(), &dz_all, 1.0, &mut grads.w_input);
    general_mat_mul(1.0, &cache.h_prev.t(), &dz_all, 1.0, &mut grads.w_recurrent);
    grads.bias += &sum_rows(&dz_all);
    // Rows of invalid steps have dz = 0, hence zero input gradient.
    dz_all.dot(&w.w_input.t())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(input: usize, units: usize, scale: f64) -> LstmWeights {
        let mut w = LstmWeights::zeros(input, units);
        for (n, v) in w.w_input.iter_mut().enumerate() {
            *v = scale * ((n as f64 * 0.37).sin());
        }
        for (n, v) in w.w_recurrent.iter_mut().enumerate() {
            *v = scale * ((n as f64 * 0.91).cos());
        }
        for (n, v) in w.bias.iter_mut().enumerate() {
            *v = 0.1 * ((n as f64 * 1.3).sin());
        }
        w
    }

    #[test]
    fn one_step_matches_closed_form() {
        let w = weights(2, 1, 0.5);
        let x = [0.3, -0.7];
        let (out, _) = forward(&w, Array2::from_shape_vec((1, 2), x.to_vec()).unwrap(), &[1], false);
        let z: Vec<f64> = (0..4)
            .map(|g| x[0] * w.w_input[[0, g]] + x[1] * w.w_input[[1, g]] + w.bias[g])
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = sig(z[0]) * z[2].tanh();
        let h = sig(z[3]) * c.tanh();
        assert!((out[[0, 0]] - h).abs() < 1e-15);
    }

    #[test]
    fn invalid_steps_carry_state() {
        let w = weights(2, 3, 0.4);
        // two steps, batch of one valid for a single step
        let x = Array2::from_shape_vec((2, 2), vec![0.2, 0.1, 5.0, -5.0]).unwrap();
        let (out, _) = forward(&w, x, &[1], false);
        assert_eq!(out.row(0), out.row(1));
    }
}
