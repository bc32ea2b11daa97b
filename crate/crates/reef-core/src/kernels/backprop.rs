//! One training step of a toy two-layer feedforward network: forward passes
//! and the delta matrix products run on the device, sigmoids and the weight
//! update on the host.

use crate::error::{Error, Result};
use crate::kernels::tpu_gemm;
use crate::lower::{OpKind, QuantFlags};
use crate::oracle;
use crate::runtime::Runtime;
use crate::tensor::TensorShape;
use crate::HostTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BackpropNet {
    /// Input-to-hidden weights, `inputs x hidden`.
    pub w1: HostTensor,
    /// Hidden-to-output weights, `hidden x outputs`.
    pub w2: HostTensor,
}

impl BackpropNet {
    /// Random weights with magnitudes in [0.1, 0.5]. Keeping them off zero
    /// makes relative-error comparisons meaningful for every coordinate.
    pub fn random(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> Result<BackpropNet> {
        let signed = |t: HostTensor| t.map(|u| u.signum() * (0.1 + 0.4 * u.abs()));
        Ok(BackpropNet {
            w1: signed(HostTensor::random_uniform(inputs, hidden, -1.0, 1.0, seed)?),
            w2: signed(HostTensor::random_uniform(
                hidden,
                outputs,
                -1.0,
                1.0,
                seed ^ 0xbadc0de,
            )?),
        })
    }
}

fn sigmoid(t: &HostTensor) -> HostTensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Safety margin applied to calibrated preactivation ranges.
const CALIBRATION_MARGIN: f64 = 1.5;

/// Declared output ranges for the three fully-connected products, measured
/// once on the host with the first sample. Worst-case range rules waste most
/// of the 8-bit grid on zero-centered activations; a calibration pass is the
/// standard cure. Later samples exceeding a range clamp (counted, not
/// fatal).
struct Calibration {
    hidden: f64,
    output: f64,
    back: f64,
}

fn calibrate(net: &BackpropNet, sample: &HostTensor, target_row: &[f64]) -> Result<Calibration> {
    let h_in = oracle::gemm(sample, &net.w1)?;
    let h = sigmoid(&h_in);
    let o_in = oracle::gemm(&h, &net.w2)?;
    let o = sigmoid(&o_in);
    let mut delta_o = HostTensor::zeros(1, o.cols())?;
    for j in 0..o.cols() {
        let oj = o.get(0, j);
        delta_o.set(0, j, (target_row[j] - oj) * oj * (1.0 - oj));
    }
    let back = oracle::gemm(&delta_o, &net.w2.transpose())?;
    let absmax = |t: &HostTensor| {
        t.data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-6)
            * CALIBRATION_MARGIN
    };
    Ok(Calibration {
        hidden: absmax(&h_in),
        output: absmax(&o_in),
        back: absmax(&back),
    })
}

fn device_fc(rt: &Runtime, v: &HostTensor, w: &HostTensor, bound: f64) -> Result<HostTensor> {
    let flags = QuantFlags {
        output_range: Some((-bound, bound)),
        ..Default::default()
    };
    let bv = super::upload(rt, v)?;
    let bw = super::upload(rt, w)?;
    super::run_op(
        rt,
        OpKind::FullyConnected,
        &flags,
        &[bv, bw],
        TensorShape::new(1, w.cols())?,
    )
}

fn check_shapes(
    net: &BackpropNet,
    samples: &HostTensor,
    targets: &HostTensor,
) -> Result<(usize, usize, usize, usize)> {
    let (inputs, hidden) = (net.w1.rows(), net.w1.cols());
    let outputs = net.w2.cols();
    if net.w2.rows() != hidden {
        return Err(Error::invalid_shape(format!(
            "layer shapes disagree: {} then {}",
            net.w1.shape(),
            net.w2.shape()
        )));
    }
    if samples.cols() != inputs {
        return Err(Error::invalid_shape(format!(
            "samples are {}, network wants {} inputs",
            samples.shape(),
            inputs
        )));
    }
    if targets.rows() != samples.rows() || targets.cols() != outputs {
        return Err(Error::invalid_shape(format!(
            "targets are {}, expected {}x{}",
            targets.shape(),
            samples.rows(),
            outputs
        )));
    }
    Ok((samples.rows(), inputs, hidden, outputs))
}

/// One gradient step over the sample batch; returns the updated weights.
pub fn backprop(
    rt: &Runtime,
    net: &BackpropNet,
    samples: &HostTensor,
    targets: &HostTensor,
    rate: f64,
) -> Result<BackpropNet> {
    let (batch, inputs, hidden, outputs) = check_shapes(net, samples, targets)?;
    let mut g1 = HostTensor::zeros(inputs, hidden)?;
    let mut g2 = HostTensor::zeros(hidden, outputs)?;
    let w2t = net.w2.transpose();
    let first = HostTensor::new(TensorShape::new(1, inputs)?, samples.row(0).to_vec())?;
    let cal = calibrate(net, &first, targets.row(0))?;
    for s in 0..batch {
        let x = HostTensor::new(TensorShape::new(1, inputs)?, samples.row(s).to_vec())?;
        let h_in = device_fc(rt, &x, &net.w1, cal.hidden)?;
        let h = sigmoid(&h_in);
        let o_in = device_fc(rt, &h, &net.w2, cal.output)?;
        let o = sigmoid(&o_in);
        // delta_o = (target - o) * sigmoid'(o_in)
        let mut delta_o = HostTensor::zeros(1, outputs)?;
        for j in 0..outputs {
            let oj = o.get(0, j);
            delta_o.set(0, j, (targets.get(s, j) - oj) * oj * (1.0 - oj));
        }
        let back = device_fc(rt, &delta_o, &w2t, cal.back)?;
        let mut delta_h = HostTensor::zeros(1, hidden)?;
        for j in 0..hidden {
            let hj = h.get(0, j);
            delta_h.set(0, j, back.get(0, j) * hj * (1.0 - hj));
        }
        // Weight gradients as outer products on the device.
        let flags = QuantFlags::default();
        let dg2 = tpu_gemm(rt, &h.transpose(), &delta_o, &flags)?;
        let dg1 = tpu_gemm(rt, &x.transpose(), &delta_h, &flags)?;
        for (acc, v) in g2.data_mut().iter_mut().zip(dg2.data()) {
            *acc += v;
        }
        for (acc, v) in g1.data_mut().iter_mut().zip(dg1.data()) {
            *acc += v;
        }
    }
    // Host-side update in f64: the 8-bit grid is too coarse to carry the
    // accumulated weights through a device add without losing them.
    let mut out = net.clone();
    for (w, g) in out.w1.data_mut().iter_mut().zip(g1.data()) {
        *w += rate * g;
    }
    for (w, g) in out.w2.data_mut().iter_mut().zip(g2.data()) {
        *w += rate * g;
    }
    Ok(out)
}

/// Float64 reference of the same gradient step.
pub fn backprop_reference(
    net: &BackpropNet,
    samples: &HostTensor,
    targets: &HostTensor,
    rate: f64,
) -> Result<BackpropNet> {
    let (batch, inputs, hidden, outputs) = check_shapes(net, samples, targets)?;
    let mut g1 = HostTensor::zeros(inputs, hidden)?;
    let mut g2 = HostTensor::zeros(hidden, outputs)?;
    let w2t = net.w2.transpose();
    for s in 0..batch {
        let x = HostTensor::new(TensorShape::new(1, inputs)?, samples.row(s).to_vec())?;
        let h = sigmoid(&oracle::gemm(&x, &net.w1)?);
        let o = sigmoid(&oracle::gemm(&h, &net.w2)?);
        let mut delta_o = HostTensor::zeros(1, outputs)?;
        for j in 0..outputs {
            let oj = o.get(0, j);
            delta_o.set(0, j, (targets.get(s, j) - oj) * oj * (1.0 - oj));
        }
        let back = oracle::gemm(&delta_o, &w2t)?;
        let mut delta_h = HostTensor::zeros(1, hidden)?;
        for j in 0..hidden {
            let hj = h.get(0, j);
            delta_h.set(0, j, back.get(0, j) * hj * (1.0 - hj));
        }
        let dg2 = oracle::gemm(&h.transpose(), &delta_o)?;
        let dg1 = oracle::gemm(&x.transpose(), &delta_h)?;
        for (acc, v) in g2.data_mut().iter_mut().zip(dg2.data()) {
            *acc += v;
        }
        for (acc, v) in g1.data_mut().iter_mut().zip(dg1.data()) {
            *acc += v;
        }
    }
    let mut out = net.clone();
    for (w, g) in out.w1.data_mut().iter_mut().zip(g1.data()) {
        *w += rate * g;
    }
    for (w, g) in out.w2.data_mut().iter_mut().zip(g2.data()) {
        *w += rate * g;
    }
    Ok(out)
}
