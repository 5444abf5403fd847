//! The temporal segmentation network.
//!
//! Frame embeddings `[B, T, D]` receive a learned per-position vector, pass
//! through a stack of pre-norm bidirectional attention blocks and a final
//! layer norm, and are then scored by `T` independent linear classifiers,
//! one per window position, each followed by a sigmoid.

mod attention;
mod checkpoint;
mod config;
mod loss;

pub use attention::{attention_block, multi_head_attention, AttentionOutput, AttentionWeights, BlockWeights};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use loss::{bce_loss, transition_penalty};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{ParamId, Parameter};
use crate::tensor::{ensure_finite, Scalar, Tensor};
use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff_in: (ParamId, ParamId),
    ff_out: (ParamId, ParamId),
}

/// Where each named parameter lives in the flat parameter list. The order
/// is the declared (checkpoint) order.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    pos_embed: ParamId,
    blocks: Vec<BlockLayout>,
    final_ln: (ParamId, ParamId),
    classifiers: Vec<(ParamId, ParamId)>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (t, d, f) = (cfg.window_len, cfg.embed_dim, cfg.ff_dim);
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.push((name, shape));
            ParamId(shapes.len() - 1)
        };
        let pos_embed = add("pos_embed".into(), vec![t, d]);
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let mut pair = |name: &str, w: Vec<usize>, b: Vec<usize>| {
                    (
                        add(format!("layers.{l}.{name}.weight"), w),
                        add(format!("layers.{l}.{name}.bias"), b),
                    )
                };
                BlockLayout {
                    ln1: pair("ln_attn", vec![d], vec![d]),
                    q: pair("query", vec![d, d], vec![d]),
                    k: pair("key", vec![d, d], vec![d]),
                    v: pair("value", vec![d, d], vec![d]),
                    o: pair("attn_out", vec![d, d], vec![d]),
                    ln2: pair("ln_ff", vec![d], vec![d]),
                    ff_in: pair("ff_in", vec![d, f], vec![f]),
                    ff_out: pair("ff_out", vec![f, d], vec![d]),
                }
            })
            .collect();
        let final_ln = (
            add("final_ln.weight".into(), vec![d]),
            add("final_ln.bias".into(), vec![d]),
        );
        let classifiers = (0..t)
            .map(|p| {
                (
                    add(format!("classifiers.{p}.weight"), vec![d]),
                    add(format!("classifiers.{p}.bias"), vec![]),
                )
            })
            .collect();
        Layout {
            pos_embed,
            blocks,
            final_ln,
            classifiers,
            shapes,
        }
    }
}

/// Names and shapes of every parameter, in declared order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    Layout::new(config).shapes
}

/// Positional table, attention stack and per-position classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSegmenter<S: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> TemporalSegmenter<S> {
    /// Deterministic initialization: projection and classifier weights are
    /// Xavier-uniform, biases zero, norm gains one, positional table
    /// `Normal(0, 0.02)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let params = layout
            .shapes
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<S> = if name == "pos_embed" {
                    (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect()
                } else if name.starts_with("layers.") && name.contains("ln_")
                    || name.starts_with("final_ln")
                {
                    let v = if name.ends_with("weight") { S::one() } else { S::zero() };
                    vec![v; n]
                } else if name.ends_with("bias") {
                    vec![S::zero(); n]
                } else {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [i, o] => (*i, *o),
                        [i] => (*i, 1),
                        _ => unreachable!("weights are vectors or matrices"),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                    (0..n).map(|_| S::from_f64(dist.sample(&mut rng))).collect()
                };
                Parameter::new(Tensor::new(shape.clone(), data).expect("layout shape"))
            })
            .collect();
        Ok(TemporalSegmenter {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a model from parameter tensors in declared order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.shapes.len() {
            return Err(Error::Dimension(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                layout.shapes.len()
            )));
        }
        for ((name, shape), t) in layout.shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(TemporalSegmenter {
            config,
            layout,
            params: tensors.into_iter().map(Parameter::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    /// Names in declared order, e.g. `layers.3.query.weight`.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.shapes.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.layout
            .shapes
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Same weights in another precision. Optimizer state is not carried over.
    pub fn cast<T: Scalar>(&self) -> TemporalSegmenter<T> {
        TemporalSegmenter {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(Parameter::cast).collect(),
        }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [b, t, d] if *t == self.config.window_len && *d == self.config.embed_dim && *b > 0 => Ok(*b),
            _ => Err(Error::Dimension(format!(
                "expected a [batch, {}, {}] input, got {shape:?}",
                self.config.window_len, self.config.embed_dim
            ))),
        }
    }

    /// `E = f + P`: adds the positional table to every batch element.
    pub fn add_positional<'a>(&self, g: &mut Graph<'a, S>, params: &'a [Parameter<S>], frames: NodeId) -> Result<NodeId> {
        self.check_batch(g.shape(frames))?;
        let pos = g.param(self.layout.pos_embed, &params[self.layout.pos_embed.0]);
        g.add_tiled(frames, pos)
    }

    /// Records the forward pass into `g` using `params` (which must follow
    /// this model's layout) and returns the `[B, T]` probability node. Dropout
    /// is applied only when `train_rng` is given.
    pub fn build_forward<'a>(
        &self,
        g: &mut Graph<'a, S>,
        params: &'a [Parameter<S>],
        batch: NodeId,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<NodeId> {
        let b = self.check_batch(g.shape(batch))?;
        if params.len() != self.layout.shapes.len() {
            return Err(Error::Contract(format!(
                "{} parameters supplied for a layout of {}",
                params.len(),
                self.layout.shapes.len()
            )));
        }
        let cfg = &self.config;
        let (t, d) = (cfg.window_len, cfg.embed_dim);
        let p = |g: &mut Graph<'a, S>, id: ParamId| g.param(id, &params[id.0]);

        let e = self.add_positional(g, params, batch)?;
        let mut x = g.reshape(e, vec![b * t, d])?;
        for bl in &self.layout.blocks {
            let w = BlockWeights {
                ln1_gain: p(g, bl.ln1.0),
                ln1_bias: p(g, bl.ln1.1),
                attn: AttentionWeights {
                    wq: p(g, bl.q.0),
                    bq: p(g, bl.q.1),
                    wk: p(g, bl.k.0),
                    bk: p(g, bl.k.1),
                    wv: p(g, bl.v.0),
                    bv: p(g, bl.v.1),
                    wo: p(g, bl.o.0),
                    bo: p(g, bl.o.1),
                },
                ln2_gain: p(g, bl.ln2.0),
                ln2_bias: p(g, bl.ln2.1),
                ff_in: p(g, bl.ff_in.0),
                ff_in_bias: p(g, bl.ff_in.1),
                ff_out: p(g, bl.ff_out.0),
                ff_out_bias: p(g, bl.ff_out.1),
            };
            x = attention_block(
                g,
                x,
                &w,
                b,
                t,
                cfg.num_heads,
                cfg.dropout_rate,
                train_rng.as_deref_mut(),
            )?;
        }
        let (gain, bias) = (p(g, self.layout.final_ln.0), p(g, self.layout.final_ln.1));
        let h = g.layer_norm(x, gain, bias, S::from_f64(attention::LN_EPS))?;
        let h = g.reshape(h, vec![b, t, d])?;

        let weights: Vec<NodeId> = self.layout.classifiers.iter().map(|(w, _)| p(g, *w)).collect();
        let biases: Vec<NodeId> = self.layout.classifiers.iter().map(|(_, b)| p(g, *b)).collect();
        let w = g.stack(&weights)?;
        let bias = g.stack(&biases)?;
        let logits = g.positionwise_dot(h, w)?;
        let logits = g.add_tiled(logits, bias)?;
        let probs = g.sigmoid(logits);
        ensure_finite("model output", g.value(probs))?;
        Ok(probs)
    }

    /// Per-position probabilities `[B, T]` for a `[B, T, D]` batch.
    pub fn forward(&self, batch: &Tensor<S>, train_rng: Option<&mut Rng>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.input_ref(batch);
        let probs = self.build_forward(&mut g, &self.params, x, train_rng)?;
        Ok(g.tensor(probs))
    }

    /// Inference-mode forward pass (no dropout).
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward(batch, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny() -> ModelConfig {
        ModelConfig {
            ff_dim: 32,
            ..ModelConfig::sized(8, 16, 2, 2)
        }
    }

    fn random_batch(rng: &mut Rng, b: usize, cfg: &ModelConfig) -> Tensor<f32> {
        let n = b * cfg.window_len * cfg.embed_dim;
        Tensor::new(
            vec![b, cfg.window_len, cfg.embed_dim],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TemporalSegmenter::<f32>::init(tiny(), 11).unwrap();
        let b = TemporalSegmenter::<f32>::init(tiny(), 11).unwrap();
        let c = TemporalSegmenter::<f32>::init(tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for cfg in [tiny(), ModelConfig::sized(60, 64, 4, 4), ModelConfig::default()] {
            let m = TemporalSegmenter::<f32>::init(cfg, 0).unwrap();
            let enumerated: usize = m
                .layout
                .shapes
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            assert_eq!(m.num_parameters(), enumerated);
            assert_eq!(cfg.parameter_count(), enumerated);
        }
        // 60*512 + 16*(2*512 + 4*(512^2+512) + 2*512 + 2*512*2048 + 2048 + 512) + 2*512 + 60*513
        assert_eq!(ModelConfig::default().parameter_count(), 50_500_668);
    }

    #[test]
    fn classifiers_are_independent_pairs() {
        let m = TemporalSegmenter::<f32>::init(tiny(), 0).unwrap();
        let names: Vec<_> = m.param_names().filter(|n| n.starts_with("classifiers.")).collect();
        assert_eq!(names.len(), 2 * tiny().window_len);
        let w0 = m.param_id("classifiers.0.weight").unwrap();
        let w1 = m.param_id("classifiers.1.weight").unwrap();
        assert_ne!(m.params()[w0.0].tensor, m.params()[w1.0].tensor);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig { num_heads: 3, ..tiny() };
        assert!(matches!(
            TemporalSegmenter::<f32>::init(cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn positional_addition() {
        let cfg = tiny();
        let mut m = TemporalSegmenter::<f32>::init(cfg, 3).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let f = random_batch(&mut rng, 2, &cfg);
        let pos = m.layout.pos_embed.0;
        let e = {
            let mut g = Graph::new();
            let x = g.input_ref(&f);
            let e = m.add_positional(&mut g, &m.params, x).unwrap();
            g.tensor(e)
        };
        let p = m.params[pos].tensor.data();
        let at = |b: usize, t: usize, d: usize| (b * cfg.window_len + t) * cfg.embed_dim + d;
        assert_eq!(e.data()[at(0, 3, 7)], f.data()[at(0, 3, 7)] + p[3 * cfg.embed_dim + 7]);
        assert_eq!(e.data()[at(1, 5, 2)], f.data()[at(1, 5, 2)] + p[5 * cfg.embed_dim + 2]);

        let zeros = Tensor::zeros(vec![2, cfg.window_len, cfg.embed_dim]);
        let mut g = Graph::new();
        let x = g.input_ref(&zeros);
        let e = m.add_positional(&mut g, &m.params, x).unwrap();
        assert_eq!(&g.value(e)[..p.len()], p);
        assert_eq!(&g.value(e)[p.len()..], p);

        m.params[pos].tensor.data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = g.input_ref(&f);
        let e = m.add_positional(&mut g, &m.params, x).unwrap();
        assert_eq!(g.value(e), f.data());
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = tiny();
        let m = TemporalSegmenter::<f32>::init(cfg, 1).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let probs = m.predict(&random_batch(&mut rng, 3, &cfg)).unwrap();
        assert_eq!(probs.shape(), &[3, cfg.window_len]);
        assert!(probs.data().iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn zero_classifiers_give_one_half() {
        let cfg = tiny();
        let mut m = TemporalSegmenter::<f32>::init(cfg, 1).unwrap();
        let ids: Vec<usize> = m
            .param_names()
            .enumerate()
            .filter(|(_, n)| n.starts_with("classifiers."))
            .map(|(i, _)| i)
            .collect();
        for i in ids {
            m.params[i].tensor.data_mut().fill(0.0);
        }
        let mut rng = Rng::seed_from_u64(1);
        let probs = m.predict(&random_batch(&mut rng, 2, &cfg)).unwrap();
        assert!(probs.data().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn batch_elements_are_independent() {
        let cfg = tiny();
        let m = TemporalSegmenter::<f32>::init(cfg, 2).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 3, &cfg);
        let whole = m.predict(&batch).unwrap();
        let step = cfg.window_len * cfg.embed_dim;
        for (b, chunk) in batch.data().chunks(step).enumerate() {
            let single = Tensor::new(vec![1, cfg.window_len, cfg.embed_dim], chunk.to_vec()).unwrap();
            let p = m.predict(&single).unwrap();
            for (x, y) in p.data().iter().zip(&whole.data()[b * cfg.window_len..]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        // Permuting the batch permutes the outputs.
        let mut swapped = batch.data()[step..2 * step].to_vec();
        swapped.extend_from_slice(&batch.data()[..step]);
        swapped.extend_from_slice(&batch.data()[2 * step..]);
        let swapped = Tensor::new(batch.shape().to_vec(), swapped).unwrap();
        let p = m.predict(&swapped).unwrap();
        let t = cfg.window_len;
        for i in 0..t {
            assert!((p.data()[i] - whole.data()[t + i]).abs() < 1e-6);
            assert!((p.data()[t + i] - whole.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_without_dropout() {
        let cfg = tiny();
        let m = TemporalSegmenter::<f32>::init(cfg, 4).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 2, &cfg);
        assert_eq!(m.predict(&batch).unwrap(), m.predict(&batch).unwrap());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = ModelConfig { dropout_rate: 0.5, ..tiny() };
        let m = TemporalSegmenter::<f32>::init(cfg, 4).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let batch = random_batch(&mut rng, 1, &cfg);
        let eval = m.predict(&batch).unwrap();
        assert_eq!(eval, m.predict(&batch).unwrap());
        let mut drop_rng = Rng::seed_from_u64(9);
        let train = m.forward(&batch, Some(&mut drop_rng)).unwrap();
        assert_ne!(eval, train);
    }

    #[test]
    fn frame_order_matters() {
        let cfg = tiny();
        let m = TemporalSegmenter::<f32>::init(cfg, 5).unwrap();
        let mut rng = Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 1, &cfg);
        let d = cfg.embed_dim;
        let mut reversed = Vec::with_capacity(batch.numel());
        for t in (0..cfg.window_len).rev() {
            reversed.extend_from_slice(&batch.data()[t * d..(t + 1) * d]);
        }
        let reversed = Tensor::new(batch.shape().to_vec(), reversed).unwrap();
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&reversed).unwrap();
        let n = cfg.window_len;
        assert!((0..n).any(|t| a.data()[t] != b.data()[n - 1 - t]));
    }

    #[test]
    fn wrong_input_shape_is_a_dimension_error() {
        let m = TemporalSegmenter::<f32>::init(tiny(), 0).unwrap();
        let bad = Tensor::zeros(vec![1, 7, 16]);
        assert!(matches!(m.predict(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = tiny();
        let model = TemporalSegmenter::<f32>::init(cfg, 7).unwrap().cast::<f64>();
        let mut rng = Rng::seed_from_u64(7);
        let x = random_batch(&mut rng, 2, &cfg).cast::<f64>();
        let labels: Vec<f64> = (0..2 * cfg.window_len).map(|i| ((i / 3) % 2) as f64).collect();
        let report = crate::gradcheck::grad_check(
            model.params(),
            |g, p| {
                let xi = g.input(x.clone());
                let probs = model.build_forward(g, p, xi, None)?;
                let bce = g.bce(probs, &labels)?;
                let pen = g.transition_penalty(probs, 0.5)?;
                g.add(bce, pen)
            },
            1e-3,
            1e-5,
        )
        .unwrap();
        let worst = report
            .params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        let name = model.param_names().nth(worst.id.0).unwrap();
        assert!(report.passed(), "worst {name}: {worst:?}");
    }
}
