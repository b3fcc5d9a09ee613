//! Additive joint network: `Linear(tanh(A·a + L·l))` over `V + 1` outputs,
//! blank at index 0.

use rand_chacha::ChaCha8Rng;

use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct JointNetwork {
    pub acoustic: Linear,
    pub label: Linear,
    pub output: Linear,
    pub d_joint: usize,
    pub n_outputs: usize,
}

impl JointNetwork {
    pub fn new(store: &mut ParamStore, d_model: usize, d_joint: usize, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            acoustic: Linear::new(store, "joint.acoustic", d_model, d_joint, rng),
            label: Linear::new(store, "joint.label", d_model, d_joint, rng),
            output: Linear::new(store, "joint.output", d_joint, vocab_size + 1, rng),
            d_joint,
            n_outputs: vocab_size + 1,
        }
    }

    /// Logits for every lattice node, row `t·(U+1) + u`.
    pub fn forward_lattice(&self, tape: &mut Tape<'_>, acoustic: Var, labels: Var) -> Result<Var> {
        let a = self.acoustic.forward(tape, acoustic)?;
        let l = self.label.forward(tape, labels)?;
        let h = tape.pair_sum(a, l)?;
        let h = tape.tanh(h)?;
        self.output.forward(tape, h)
    }

    pub fn project_acoustic(&self, store: &ParamStore, encodings: &Tensor) -> Result<Tensor> {
        self.project(store, &self.acoustic, encodings)
    }

    pub fn project_labels(&self, store: &ParamStore, encodings: &Tensor) -> Result<Tensor> {
        self.project(store, &self.label, encodings)
    }

    fn project(&self, store: &ParamStore, lin: &Linear, x: &Tensor) -> Result<Tensor> {
        if x.rows() > 0 && x.cols() != lin.d_in {
            return Err(Error::shape("joint", format!("input dim {} vs {}", x.cols(), lin.d_in)));
        }
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| lin.apply_row(store, x.row(i))).collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.d_joint]));
        }
        Tensor::from_rows(&rows)
    }

    pub fn project_label_row(&self, store: &ParamStore, row: &[f64]) -> Vec<f64> {
        self.label.apply_row(store, row)
    }

    /// Logits from already projected acoustic and label rows.
    pub fn combine(&self, store: &ParamStore, pa: &[f64], pl: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = pa.iter().zip(pl).map(|(a, l)| (a + l).tanh()).collect();
        self.output.apply_row(store, &h)
    }

    /// Logits for one acoustic frame and one label encoding.
    pub fn joint(&self, store: &ParamStore, a: &[f64], l: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.acoustic.d_in || l.len() != self.label.d_in {
            return Err(Error::shape(
                "joint",
                format!("inputs {}/{} vs {}/{}", a.len(), l.len(), self.acoustic.d_in, self.label.d_in),
            ));
        }
        let pa = self.acoustic.apply_row(store, a);
        let pl = self.label.apply_row(store, l);
        Ok(self.combine(store, &pa, &pl))
    }
}
