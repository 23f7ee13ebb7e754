use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, ParamVars};
use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Fully connected network: rectifier on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths..., output width.
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("MLP widths must be at least 1"));
        }
        Ok(Self { widths })
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}w{layer}")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}b{layer}")
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Inserts `prefix`-named weights (`in × out`) and biases (`1 × out`).
    /// Hidden layers use He-uniform initialization; the output layer is
    /// scaled down so initial offsets start small.
    pub fn init_params(&self, prefix: &str, rng: &mut impl Rng, store: &mut ParamStore) -> Result<()> {
        let last = self.layer_count() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if l == last {
                bound *= 0.1;
            }
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(Self::weight_name(prefix, l), Tensor::from_vec(fan_in, fan_out, data))?;
            store.insert(Self::bias_name(prefix, l), Tensor::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Resolves and shape-checks this network's parameters.
    pub fn layers<'a>(&self, params: &'a ParamStore, prefix: &str) -> Result<Vec<(&'a Tensor, &'a Tensor)>> {
        self.widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let weight = params.require(&Self::weight_name(prefix, l))?;
                let bias = params.require(&Self::bias_name(prefix, l))?;
                if weight.shape() != (w[0], w[1]) || bias.shape() != (1, w[1]) {
                    return Err(Error::invalid(format!(
                        "layer {l} of {prefix:?} has shape {:?}/{:?}, expected ({}, {})",
                        weight.shape(),
                        bias.shape(),
                        w[0],
                        w[1]
                    )));
                }
                Ok((weight, bias))
            })
            .collect()
    }
}

/// Evaluates the network on one input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamStore, prefix: &str, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_width() {
        return Err(Error::invalid(format!(
            "input has length {}, network expects {}",
            input.len(),
            spec.input_width()
        )));
    }
    Ok(mlp_forward_batch(spec, params, prefix, &Tensor::row(input))?.data)
}

/// Evaluates the network on each row of `inputs`.
pub fn mlp_forward_batch(spec: &MlpSpec, params: &ParamStore, prefix: &str, inputs: &Tensor) -> Result<Tensor> {
    if inputs.cols != spec.input_width() {
        return Err(Error::invalid(format!(
            "inputs have {} columns, network expects {}",
            inputs.cols,
            spec.input_width()
        )));
    }
    let layers = spec.layers(params, prefix)?;
    let last = layers.len() - 1;
    let mut h = inputs.clone();
    for (l, (w, b)) in layers.into_iter().enumerate() {
        let mut out = Tensor::zeros(h.rows, w.cols);
        for r in 0..h.rows {
            out.row_slice_mut(r).copy_from_slice(&b.data);
        }
        gemm(&h, false, w, false, &mut out, 1.0);
        if l != last {
            for x in &mut out.data {
                *x = x.max(0.0);
            }
        }
        h = out;
    }
    Ok(h)
}

/// Records the network on a tape. `input` has one row per sample.
pub fn mlp_forward_tape(tape: &mut Tape, spec: &MlpSpec, vars: &ParamVars, prefix: &str, input: Var) -> Var {
    let last = spec.layer_count() - 1;
    let mut h = input;
    for l in 0..spec.layer_count() {
        let w = vars.get(&MlpSpec::weight_name(prefix, l));
        let b = vars.get(&MlpSpec::bias_name(prefix, l));
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        h = if l == last { z } else { tape.relu(z) };
    }
    h
}
