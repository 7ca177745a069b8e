use rand::Rng;

use super::ops::dense;
use super::Tensor;
use crate::error::{dim_err, Result};

/// Gate weights stacked in input, forget, cell, output order.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `[4H, N]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmParams {
    /// Uniform `(-1/sqrt(H), 1/sqrt(H))` initialisation.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, input], -bound, bound, rng).requires_grad_(true),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], -bound, bound, rng).requires_grad_(true),
            bias: Tensor::uniform(&[4 * hidden], -bound, bound, rng).requires_grad_(true),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]).requires_grad_(true),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]).requires_grad_(true),
            bias: Tensor::zeros(&[4 * hidden]).requires_grad_(true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }
}

/// One LSTM step. Returns `(h', c')`.
pub fn lstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, params: &LstmParams) -> Result<(Tensor, Tensor)> {
    let hidden = params.hidden();
    let batch = x.shape()[0];
    if h.shape() != [batch, hidden] || c.shape() != [batch, hidden] {
        return Err(dim_err!(
            "lstm_cell: state shapes {:?}/{:?} do not match [{batch}, {hidden}]",
            h.shape(),
            c.shape()
        ));
    }
    let recurrent = dense(h, &params.w_hh, &Tensor::zeros(&[4 * hidden]))?;
    let gates = dense(x, &params.w_ih, &params.bias)?.add(&recurrent)?;
    let input_gate = gates.narrow_cols(0, hidden)?.sigmoid();
    let forget_gate = gates.narrow_cols(hidden, hidden)?.sigmoid();
    let candidate = gates.narrow_cols(2 * hidden, hidden)?.tanh();
    let output_gate = gates.narrow_cols(3 * hidden, hidden)?.sigmoid();
    let c_next = forget_gate.mul(c)?.add(&input_gate.mul(&candidate)?)?;
    let h_next = output_gate.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmParams::zeros(4, 3);
        let (h, c) = lstm_cell(&Tensor::ones(&[2, 4]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]), &p).unwrap();
        assert!(h.to_vec().iter().all(|v| *v == 0.0));
        assert!(c.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_gates_carry_the_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::zeros(4, 3);
        let mut bias = vec![0.0; 12];
        bias[0..3].fill(-1000.0); // input gate shut
        bias[3..6].fill(1000.0); // forget gate open
        p.bias.set_data(bias).unwrap();
        let c = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
        let (_, c_next) = lstm_cell(&Tensor::ones(&[1, 4]), &Tensor::zeros(&[1, 3]), &c, &p).unwrap();
        for (a, b) in c_next.to_vec().iter().zip(c.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_state_shape() {
        let p = LstmParams::zeros(4, 3);
        assert!(lstm_cell(&Tensor::ones(&[1, 4]), &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 3]), &p).is_err());
    }

    #[test]
    fn three_chained_steps_pass_gradcheck() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = LstmParams::init(4, 3, &mut rng);
            let xs: Vec<Tensor> = (0..3)
                .map(|_| Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng).requires_grad_(true))
                .collect();
            let probe = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            params.extend(xs.iter().cloned());
            let report = check_gradients(&params, &cfg, || {
                let mut h = Tensor::zeros(&[2, 3]);
                let mut c = Tensor::zeros(&[2, 3]);
                for x in &xs {
                    (h, c) = lstm_cell(x, &h, &c, &p)?;
                }
                Ok(h.mul(&probe)?.sum().add(&c.sum())?)
            })
            .unwrap();
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
