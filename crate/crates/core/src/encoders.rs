//! Per-modality MLP encoders with unit-norm outputs.
//!
//! An encoder is `Linear -> ReLU -> Dropout` repeated per hidden layer,
//! then a final `Linear` into the embedding space, and (by default) row
//! l2 normalization. Weights start fan-in uniform `U(-1/sqrt(in),
//! 1/sqrt(in))`, biases zero. Dropout uses inverted scaling (`1/(1-rate)`
//! on kept units) and only fires in training mode, with masks drawn from
//! per-(modality, layer, step) substreams so a step is reproducible in
//! isolation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{ParamBinding, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::NORM_EPS;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Dropout rate after each hidden activation, same length as
    /// `hidden_dims`.
    pub hidden_dropouts: Vec<f64>,
    pub embedding_dim: usize,
    pub normalize_output: bool,
}

impl Default for MlpEncoderConfig {
    fn default() -> Self {
        MlpEncoderConfig {
            input_dim: 128,
            hidden_dims: vec![256, 256],
            hidden_dropouts: vec![0.0, 0.0],
            embedding_dim: 256,
            normalize_output: true,
        }
    }
}

impl MlpEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("encoder input_dim must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_dims entries must be positive"));
        }
        if self.hidden_dims.len() != self.hidden_dropouts.len() {
            return Err(Error::config(format!(
                "{} hidden_dims but {} hidden_dropouts",
                self.hidden_dims.len(),
                self.hidden_dropouts.len()
            )));
        }
        if self.hidden_dropouts.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Dense embeddings for one modality, row-major `[rows x dim]`.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub values: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub modality: usize,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Dropout behavior for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum DropoutMode {
    Eval,
    /// Masks are drawn from `(seed, modality, layer, step)` substreams.
    Train { seed: u64, step: u64 },
}

pub struct MlpEncoder {
    pub cfg: MlpEncoderConfig,
    pub modality: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpEncoder {
    /// Registers `prefix.layer{i}.{weight,bias}` parameters and returns
    /// the encoder. Initialization is deterministic in `(seed, modality)`.
    pub fn build(
        cfg: &MlpEncoderConfig,
        modality: usize,
        set: &mut ParamSet,
        prefix: &str,
        seed: u64,
    ) -> Result<MlpEncoder> {
        cfg.validate()?;
        let mut dims = vec![cfg.input_dim];
        dims.extend_from_slice(&cfg.hidden_dims);
        dims.push(cfg.embedding_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for layer in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let mut rng = crate::rng::stream(seed, "init/enc", &[modality as u64, layer as u64]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> =
                (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let w = set.add(
                format!("{prefix}.layer{layer}.weight"),
                Tensor::new(vec![fan_in, fan_out], data)?,
                1.0,
                true,
            )?;
            let b = set.add(
                format!("{prefix}.layer{layer}.bias"),
                Tensor::zeros(vec![fan_out]),
                1.0,
                true,
            )?;
            layers.push((w, b));
        }
        Ok(MlpEncoder { cfg: cfg.clone(), modality, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.cfg.input_dim {
            return Err(Error::dim(format!(
                "encoder for modality {} expects width {}, got {width}",
                self.modality, self.cfg.input_dim
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass; `inputs` is `[B x input_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &ParamBinding,
        inputs: Var,
        mode: DropoutMode,
    ) -> Result<Var> {
        let shape = g.shape(inputs).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("encoder input must be a matrix, got {shape:?}")));
        }
        self.check_width(shape[1])?;
        let b = shape[0];

        let mut x = inputs;
        let hidden = self.layers.len() - 1;
        for (layer, &(w, bias)) in self.layers.iter().enumerate() {
            x = g.linear(x, binding.var(w), binding.var(bias))?;
            if layer < hidden {
                x = g.relu(x);
                let rate = self.cfg.hidden_dropouts[layer];
                if rate > 0.0 {
                    if let DropoutMode::Train { seed, step } = mode {
                        let width = self.cfg.hidden_dims[layer];
                        let mask = dropout_mask(seed, self.modality, layer, step, b * width, rate);
                        let mask = g.constant(vec![b, width], mask)?;
                        x = g.mul(x, mask)?;
                    }
                }
            }
        }
        if self.cfg.normalize_output {
            x = g.l2_normalize_rows(x, NORM_EPS)?;
        }
        Ok(x)
    }

    /// Evaluation-mode forward on plain values (dropout never fires).
    pub fn forward_values(&self, params: &ParamSet, inputs: &[f64], rows: usize) -> Result<EmbeddingBatch> {
        if rows == 0 || inputs.len() % rows != 0 {
            return Err(Error::dim(format!(
                "input length {} does not divide into {rows} rows",
                inputs.len()
            )));
        }
        self.check_width(inputs.len() / rows)?;

        let mut x = inputs.to_vec();
        let mut width = self.cfg.input_dim;
        let hidden = self.layers.len() - 1;
        for (layer, &(w, bias)) in self.layers.iter().enumerate() {
            let wt = params.value(w);
            let bt = params.value(bias);
            let out_w = wt.shape()[1];
            let mut y = linalg::matmul_nn(&x, wt.data(), rows, width, out_w);
            for row in y.chunks_exact_mut(out_w) {
                for (yo, bo) in row.iter_mut().zip(bt.data()) {
                    *yo += bo;
                }
            }
            if layer < hidden {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
            width = out_w;
        }
        if self.cfg.normalize_output {
            for row in x.chunks_exact_mut(width) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(EmbeddingBatch {
            values: x,
            rows,
            dim: width,
            modality: self.modality,
            normalized: self.cfg.normalize_output,
        })
    }
}

fn dropout_mask(seed: u64, modality: usize, layer: usize, step: u64, n: usize, rate: f64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "dropout", &[modality as u64, layer as u64, step]);
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..n).map(|_| if rng.gen_bool(keep) { scale } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::gradient_check;

    fn tiny_cfg() -> MlpEncoderConfig {
        MlpEncoderConfig {
            input_dim: 10,
            hidden_dims: vec![8],
            hidden_dropouts: vec![0.0],
            embedding_dim: 6,
            normalize_output: true,
        }
    }

    fn rand_inputs(rng: &mut impl Rng, rows: usize, width: usize) -> Vec<f64> {
        (0..rows * width).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut s1 = ParamSet::new();
        let mut s2 = ParamSet::new();
        MlpEncoder::build(&tiny_cfg(), 1, &mut s1, "enc.B", 5).unwrap();
        MlpEncoder::build(&tiny_cfg(), 1, &mut s2, "enc.B", 5).unwrap();
        for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut s3 = ParamSet::new();
        MlpEncoder::build(&tiny_cfg(), 1, &mut s3, "enc.B", 6).unwrap();
        let differs = s1
            .iter()
            .zip(s3.iter())
            .any(|((_, a), (_, b))| a.value.data() != b.value.data());
        assert!(differs);
    }

    #[test]
    fn no_hidden_layers_is_single_linear() {
        let cfg = MlpEncoderConfig {
            input_dim: 7,
            hidden_dims: vec![],
            hidden_dropouts: vec![],
            embedding_dim: 4,
            normalize_output: false,
        };
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&cfg, 0, &mut set, "enc.A", 1).unwrap();
        assert_eq!(enc.num_layers(), 1);
        assert_eq!(set.total_elements(), 7 * 4 + 4);

        // hand check: y = x W + b on a 1-row input
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_inputs(&mut rng, 1, 7);
        let out = enc.forward_values(&set, &x, 1).unwrap();
        let w = set.value(set.id_of("enc.A.layer0.weight").unwrap());
        for o in 0..4 {
            let want: f64 = (0..7).map(|i| x[i] * w.data()[i * 4 + o]).sum();
            assert!((out.values[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn init_moments_match_fan_in_uniform() {
        let mut set = ParamSet::new();
        let cfg = MlpEncoderConfig::default(); // first layer 128 x 256 = 32768 draws
        MlpEncoder::build(&cfg, 2, &mut set, "enc.C", 9).unwrap();
        let w = set.value(set.id_of("enc.C.layer0.weight").unwrap());
        let data = w.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expect = (1.0f64 / (3.0 * 128.0)).sqrt();
        assert!(mean.abs() < 4.0 * expect / n.sqrt() + 1e-6, "mean {mean} too far from 0");
        assert!((std - expect).abs() / expect < 0.03, "std {std} vs expected {expect}");
        let bound = 1.0 / (128.0f64).sqrt();
        assert!(data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&tiny_cfg(), 0, &mut set, "enc.A", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_inputs(&mut rng, 5, 10);
        let out = enc.forward_values(&set, &x, 5).unwrap();
        assert!(out.normalized);
        for i in 0..5 {
            let norm: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-8, "row {i} norm {norm}");
        }
    }

    #[test]
    fn zero_final_layer_keeps_zero_rows() {
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&tiny_cfg(), 0, &mut set, "enc.A", 3).unwrap();
        let last = enc.num_layers() - 1;
        for suffix in ["weight", "bias"] {
            let id = set.id_of(&format!("enc.A.layer{last}.{suffix}")).unwrap();
            set.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_inputs(&mut rng, 3, 10);
        let out = enc.forward_values(&set, &x, 3).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0), "zero rows stay zero through the guard");
    }

    #[test]
    fn eval_mode_ignores_dropout_and_train_mode_masks() {
        let cfg = MlpEncoderConfig {
            hidden_dropouts: vec![0.5],
            hidden_dims: vec![64],
            input_dim: 12,
            embedding_dim: 8,
            normalize_output: false,
        };
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&cfg, 1, &mut set, "enc.B", 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_inputs(&mut rng, 6, 12);

        let run = |mode: DropoutMode| -> Vec<f64> {
            let mut g = Graph::new();
            let binding = set.bind(&mut g);
            let xin = g.constant(vec![6, 12], x.clone()).unwrap();
            let out = enc.forward(&mut g, &binding, xin, mode).unwrap();
            g.value(out).to_vec()
        };

        let eval1 = run(DropoutMode::Eval);
        let eval2 = run(DropoutMode::Eval);
        assert_eq!(eval1, eval2, "eval forward is deterministic");
        let values = enc.forward_values(&set, &x, 6).unwrap();
        for (a, b) in eval1.iter().zip(&values.values) {
            assert!((a - b).abs() <= 1e-12, "graph and value paths agree");
        }

        let t1 = run(DropoutMode::Train { seed: 99, step: 0 });
        let t2 = run(DropoutMode::Train { seed: 99, step: 0 });
        assert_eq!(t1, t2, "same step same mask");
        let t3 = run(DropoutMode::Train { seed: 99, step: 1 });
        assert_ne!(t1, t3, "different step different mask");
        assert_ne!(t1, eval1, "dropout actually fires in train mode");

        // mask keeps roughly half the units
        let mask = dropout_mask(99, 1, 0, 0, 6 * 64, 0.5);
        let kept = mask.iter().filter(|&&v| v != 0.0).count() as f64;
        let sd = (6.0f64 * 64.0 * 0.25).sqrt();
        assert!((kept - 192.0).abs() < 4.0 * sd);
        assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&tiny_cfg(), 0, &mut set, "enc.A", 3).unwrap();
        assert!(enc.forward_values(&set, &[0.0; 9], 1).is_err());
        let mut g = Graph::new();
        let binding = set.bind(&mut g);
        let bad = g.constant(vec![1, 9], vec![0.0; 9]).unwrap();
        assert!(enc.forward(&mut g, &binding, bad, DropoutMode::Eval).is_err());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = tiny_cfg();
        cfg.hidden_dropouts = vec![0.0, 0.1];
        assert!(cfg.validate().is_err());
        cfg.hidden_dropouts = vec![1.0];
        assert!(cfg.validate().is_err());
        cfg.hidden_dropouts = vec![0.5];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let enc = MlpEncoder::build(&cfg, 0, &mut set, "enc.A", 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_inputs(&mut rng, 4, 10);
        let probe: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        for name in ["enc.A.layer0.weight", "enc.A.layer1.weight", "enc.A.layer0.bias"] {
            let id = set.id_of(name).unwrap();
            let start = set.value(id).clone();
            let worst = gradient_check(
                |g, v| {
                    let binding = set.bind_with(g, &[(id, v)]);
                    let xin = g.constant(vec![4, 10], x.clone())?;
                    let out = enc.forward(g, &binding, xin, DropoutMode::Eval)?;
                    let pv = g.constant(vec![4, 6], probe.clone())?;
                    let weighted = g.mul(out, pv)?;
                    g.sum(weighted, None)
                },
                &start,
                1e-5,
            )
            .unwrap();
            assert!(worst < 1e-4, "{name}: gradient mismatch {worst}");
        }
    }
}
