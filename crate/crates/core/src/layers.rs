//! Parameterized layers: time-distributed dense, LSTM cell, bidirectional
//! LSTM and embedding lookup.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &Graph, x: Var) -> Result<Var> {
        match self {
            Activation::None => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(rng, input_dim, output_dim),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output_dim]));
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
            activation,
        }
    }

    /// `activation(x W + b)` applied to every row of `x` (or to `x` itself
    /// when it is a vector), so a `[T, in]` input is processed frame by frame
    /// with shared weights.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x)?;
        if shape.last() != Some(&self.input_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                left: shape,
                right: vec![self.input_dim, self.output_dim],
            });
        }
        let y = g.matmul(x, p.var(self.weight))?;
        let y = g.add_row(y, p.var(self.bias))?;
        self.activation.apply(g, y)
    }
}

/// LSTM state `(h, c)`, each a vector of `hidden_dim`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &Graph, hidden_dim: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[hidden_dim])),
            c: g.constant(Tensor::zeros(&[hidden_dim])),
        }
    }
}

/// Gate order inside the fused weight: input, forget, candidate, output.
const GATES: [&str; 4] = ["i", "f", "g", "o"];

#[derive(Clone, Debug)]
pub struct LstmCell {
    /// Per-gate weights over `[input_dim + hidden_dim] -> hidden_dim`.
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let weights = GATES.map(|gate| {
            store.add(
                format!("{name}.w_{gate}"),
                glorot_uniform(rng, fan_in, hidden_dim),
            )
        });
        let biases = GATES.map(|gate| {
            let init = if gate == "f" { 1.0 } else { 0.0 };
            store.add(
                format!("{name}.b_{gate}"),
                Tensor::filled(&[hidden_dim], init),
            )
        });
        Self {
            weights,
            biases,
            input_dim,
            hidden_dim,
        }
    }

    /// Fuses the four gate matrices for one forward pass. Done once per
    /// graph so each timestep costs a single matmul.
    pub fn fuse(&self, g: &Graph, p: &Bound) -> Result<FusedLstm> {
        let w = g.concat(&self.weights.map(|id| p.var(id)), 1)?;
        let b = g.concat(&self.biases.map(|id| p.var(id)), 0)?;
        Ok(FusedLstm {
            weight: w,
            bias: b,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
        })
    }

    pub fn step(&self, g: &Graph, p: &Bound, x: Var, state: LstmState) -> Result<LstmState> {
        self.fuse(g, p)?.step(g, x, state)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedLstm {
    weight: Var,
    bias: Var,
    input_dim: usize,
    hidden_dim: usize,
}

impl FusedLstm {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// One gated update:
    /// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
    pub fn step(&self, g: &Graph, x: Var, state: LstmState) -> Result<LstmState> {
        let xs = g.shape(x)?;
        if xs != [self.input_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm_step",
                left: xs,
                right: vec![self.input_dim],
            });
        }
        for s in [state.h, state.c] {
            let shape = g.shape(s)?;
            if shape != [self.hidden_dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "lstm_step",
                    left: shape,
                    right: vec![self.hidden_dim],
                });
            }
        }
        let hd = self.hidden_dim;
        let xh = g.concat(&[x, state.h], 0)?;
        let z = g.matmul(xh, self.weight)?;
        let z = g.add(z, self.bias)?;
        let i = g.sigmoid(g.narrow(z, 0, 0, hd)?)?;
        let f = g.sigmoid(g.narrow(z, 0, hd, hd)?)?;
        let cand = g.tanh(g.narrow(z, 0, 2 * hd, hd)?)?;
        let o = g.sigmoid(g.narrow(z, 0, 3 * hd, hd)?)?;
        let c = g.add(g.mul(f, state.c)?, g.mul(i, cand)?)?;
        let h = g.mul(o, g.tanh(c)?)?;
        Ok(LstmState { h, c })
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

/// Outputs of a bidirectional scan.
#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// `[T, 2 * hidden]`, row `t` is `[h_fwd_t ; h_bwd_t]`.
    pub outputs: Var,
    /// State of the forward cell after `t = T`.
    pub forward_final: LstmState,
    /// State of the backward cell after `t = 1`.
    pub backward_final: LstmState,
}

impl BiLstmLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, rng, &format!("{name}.fwd"), input_dim, hidden_dim),
            backward: LstmCell::new(store, rng, &format!("{name}.bwd"), input_dim, hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    pub fn forward(&self, g: &Graph, p: &Bound, seq: Var) -> Result<BiLstmOutput> {
        let shape = g.shape(seq)?;
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "bilstm",
                expected: "2",
                shape,
            });
        }
        let steps = shape[0];
        let hd = self.hidden_dim();
        let fwd = self.forward.fuse(g, p)?;
        let bwd = self.backward.fuse(g, p)?;
        let rows = (0..steps)
            .map(|t| g.row(seq, t))
            .collect::<Result<Vec<_>>>()?;

        let mut state = LstmState::zeros(g, hd);
        let mut fwd_h = Vec::with_capacity(steps);
        for &x in &rows {
            state = fwd.step(g, x, state)?;
            fwd_h.push(state.h);
        }
        let forward_final = state;

        let mut state = LstmState::zeros(g, hd);
        let mut bwd_h = vec![state.h; steps];
        for t in (0..steps).rev() {
            state = bwd.step(g, rows[t], state)?;
            bwd_h[t] = state.h;
        }
        let backward_final = state;

        let outputs = g.concat(&[g.stack(&fwd_h)?, g.stack(&bwd_h)?], 1)?;
        Ok(BiLstmOutput {
            outputs,
            forward_final,
            backward_final,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: ParamId,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        vocab_size: usize,
        embed_dim: usize,
    ) -> Self {
        let matrix = store.add(name, glorot_uniform(rng, vocab_size, embed_dim));
        Self {
            matrix,
            vocab_size,
            embed_dim,
        }
    }

    /// Rows of the table for `ids`, shape `[ids.len(), embed_dim]`.
    pub fn lookup(&self, g: &Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        g.gather(p.var(self.matrix), ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn dense_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, &mut rng, "d", 2, 2, Activation::None);

        zero_all(&mut store);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::vector(vec![3.0, -4.0]));
        let y = layer.forward(&g, &p, x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0]);

        *store.get_mut(layer.weight) = Tensor::identity(2);
        let relu = DenseLayer {
            activation: Activation::Relu,
            ..layer.clone()
        };
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = relu.forward(&g, &p, x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 2.0]);

        *store.get_mut(layer.weight) = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        *store.get_mut(layer.bias) = Tensor::vector(vec![1.0, 1.0]);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = layer.forward(&g, &p, x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[2.0, 3.0]);

        let bad = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        assert!(layer.forward(&g, &p, bad).is_err());
    }

    #[test]
    fn dense_is_time_distributed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, &mut rng, "d", 3, 2, Activation::Tanh);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let seq = g.constant(Tensor::from_rows(&[[1.0, 0.0, -1.0], [0.5, 0.5, 0.5]]));
        let all = g.value(layer.forward(&g, &p, seq).unwrap()).unwrap();
        for t in 0..2 {
            let row = g.row(seq, t).unwrap();
            let single = g.value(layer.forward(&g, &p, row).unwrap()).unwrap();
            assert_eq!(all.row(t), single.data());
        }
    }

    #[test]
    fn lstm_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "c", 3, 2);
        zero_all(&mut store);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::vector(vec![0.4, -0.2, 0.9]));
        let s = cell.step(&g, &p, x, LstmState::zeros(&g, 2)).unwrap();
        assert_eq!(g.value(s.h).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.value(s.c).unwrap().data(), &[0.0, 0.0]);

        let prev = LstmState {
            h: g.constant(Tensor::zeros(&[2])),
            c: g.constant(Tensor::vector(vec![2.0, -2.0])),
        };
        let s = cell.step(&g, &p, x, prev).unwrap();
        assert_eq!(g.value(s.c).unwrap().data(), &[1.0, -1.0]);
        let h = g.value(s.h).unwrap();
        assert!((h.data()[0] - 0.380797).abs() < 1e-6);
        assert!((h.data()[1] + 0.380797).abs() < 1e-6);
    }

    #[test]
    fn lstm_rejects_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "c", 3, 2);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::zeros(&[4]));
        assert!(cell.step(&g, &p, x, LstmState::zeros(&g, 2)).is_err());
        let x = g.constant(Tensor::zeros(&[3]));
        assert!(cell.step(&g, &p, x, LstmState::zeros(&g, 3)).is_err());
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "c", 3, 2);
        assert_eq!(store.get(cell.biases[1]).data(), &[1.0, 1.0]);
        assert_eq!(store.get(cell.biases[0]).data(), &[0.0, 0.0]);
        assert_eq!(store.name(cell.biases[1]), "c.b_f");
    }

    #[test]
    fn bilstm_zero_params_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = BiLstmLayer::new(&mut store, &mut rng, "l", 3, 4);
        for steps in 1..5 {
            let g = Graph::new();
            let p = store.bind(&g, false);
            let seq = g.constant(Tensor::filled(&[steps, 3], 0.3));
            let out = layer.forward(&g, &p, seq).unwrap();
            assert_eq!(g.shape(out.outputs).unwrap(), vec![steps, 8]);
        }
        zero_all(&mut store);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let seq = g.constant(Tensor::filled(&[5, 3], 0.7));
        let out = layer.forward(&g, &p, seq).unwrap();
        assert!(g
            .value(out.outputs)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_lookup_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = EmbeddingTable::new(&mut store, &mut rng, "emb", 5, 3);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let rows = g.value(emb.lookup(&g, &p, &[2]).unwrap()).unwrap();
        assert_eq!(rows.data(), store.get(emb.matrix).row(2));
        let err = emb.lookup(&g, &p, &[1, 9]).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");
    }
}
