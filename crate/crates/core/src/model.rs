//! End-to-end network: stem → PGN stages (with MLG blocks) → fused readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{backbone_stem, downsample, pgn_block, pgn_block_with_graph, PatchNodes, PgnBlockParams};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{grid_sincos, relative_bias, FeatureGraph};
use crate::head::{fused_logits, label_logits, patch_logits, HeadParams};
use crate::mlg::{llg_block, plg_block, plg_update};
use crate::params::{lecun, normal, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, ValueId};

/// Prefixes of every parameter on the label path (PLG/LLG weights and readout).
pub const LABEL_PATH_PREFIXES: [&str; 2] = ["mlg.", "head.readout"];

#[derive(Debug, Clone)]
pub struct Atgnn<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stage_bias: Vec<Option<Tensor<T>>>,
}

/// Handles into the tape produced by [`Atgnn::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[1 × S]` pre-sigmoid scores.
    pub logits: ValueId,
    pub patch_logits: ValueId,
    pub label_logits: ValueId,
    pub patches: PatchNodes,
    pub labels: ValueId,
    pub bound: Bound,
    pub topology: Topology,
}

/// Every graph built during one forward pass, in construction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    pub pgn: Vec<FeatureGraph>,
    /// Label→patch neighbor lists per PLG block.
    pub plg: Vec<Vec<Vec<usize>>>,
}

fn stage_bias<T: Scalar>(config: &ModelConfig) -> Vec<Option<Tensor<T>>> {
    config
        .stage_grids()
        .into_iter()
        .zip(&config.stage_dims)
        .map(|((h, w), &dim)| {
            if config.variant != Variant::Pyramid || !config.relative_pos {
                return None;
            }
            let e = grid_sincos::<T>(h, w, dim);
            Some(relative_bias(&e).scale(T::of(config.rel_bias_sign * dim as f64)))
        })
        .collect()
}

impl<T: Scalar> Atgnn<T> {
    /// Randomly initialized model (deterministic in `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::new();
        let s = config.classes;

        let mut cin = 1;
        for (i, &c) in config.stem_channels.iter().enumerate() {
            p.insert(format!("stem.{i}.w"), normal(&mut rng, c, cin * 9, 1.0 / ((cin * 9) as f64).sqrt()));
            p.insert(format!("stem.{i}.b"), Tensor::zeros(c, 1));
            cin = c;
        }
        let (g0, t0) = config.stage_grids()[0];
        p.insert("pos", normal(&mut rng, g0 * t0, config.stage_dims[0], 0.02));

        let mut layer = 0;
        let mut mlg = 0;
        for (stage, &d) in config.stage_dims.iter().enumerate() {
            let hd = d * config.ffn_ratio;
            for _ in 0..config.stage_pgn[stage] {
                let k = |n: &str| format!("pgn.{layer}.{n}");
                p.insert(k("norm1.g"), Tensor::full(1, d, T::one()));
                p.insert(k("norm1.b"), Tensor::zeros(1, d));
                p.insert(k("w_in"), lecun(&mut rng, d, d));
                p.insert(k("b_in"), Tensor::zeros(1, d));
                p.insert(k("w_update"), lecun(&mut rng, 2 * d, d));
                p.insert(k("b_update"), Tensor::zeros(1, d));
                p.insert(k("w_out"), lecun(&mut rng, d, d));
                p.insert(k("b_out"), Tensor::zeros(1, d));
                p.insert(k("norm2.g"), Tensor::full(1, d, T::one()));
                p.insert(k("norm2.b"), Tensor::zeros(1, d));
                p.insert(k("ffn.w1"), lecun(&mut rng, d, hd));
                p.insert(k("ffn.b1"), Tensor::zeros(1, hd));
                p.insert(k("ffn.w2"), lecun(&mut rng, hd, d));
                p.insert(k("ffn.b2"), Tensor::zeros(1, d));
                layer += 1;
            }
            p.insert(format!("labels.{stage}.emb"), normal(&mut rng, s, d, 1.0));
            if stage > 0 {
                let prev = config.stage_dims[stage - 1];
                p.insert(format!("labels.{stage}.proj"), lecun(&mut rng, prev, d));
            }
            for _ in 0..config.stage_mlg[stage] {
                p.insert(format!("mlg.{mlg}.w_update"), normal(&mut rng, 2 * d, d, 0.5 / ((2 * d) as f64).sqrt()));
                p.insert(format!("mlg.{mlg}.adj"), normal(&mut rng, s, s, 0.01));
                mlg += 1;
            }
            if stage + 1 < config.stages() {
                let next = config.stage_dims[stage + 1];
                p.insert(format!("down.{stage}.w"), normal(&mut rng, next, d * 9, 1.0 / ((d * 9) as f64).sqrt()));
                p.insert(format!("down.{stage}.b"), Tensor::zeros(next, 1));
            }
        }
        let d = *config.stage_dims.last().expect("validated");
        let hh = d * config.head_ratio;
        p.insert("head.w1", lecun(&mut rng, d, hh));
        p.insert("head.b1", Tensor::zeros(1, hh));
        p.insert("head.w2", lecun(&mut rng, hh, s));
        p.insert("head.b2", Tensor::zeros(1, s));
        p.insert("head.readout", lecun(&mut rng, s, d).scale(T::of(((s as f64) / (d as f64)).sqrt())));

        Ok(Atgnn {
            stage_bias: stage_bias(&config),
            config,
            params: p,
        })
    }

    /// Rebuilds a model from stored parameters, checking keys and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        let expected: Vec<_> = fresh.params.iter().map(|(k, t)| (k.clone(), t.shape())).collect();
        let got: Vec<_> = params.iter().map(|(k, t)| (k.clone(), t.shape())).collect();
        if expected != got {
            return Err(Error::Data("parameter set does not match the model configuration".into()));
        }
        Ok(Atgnn {
            stage_bias: fresh.stage_bias,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Zeroes PLG/LLG weights and the label readout, leaving only the patch path.
    pub fn disable_label_path(&mut self) {
        self.params.zero_matching(&LABEL_PATH_PREFIXES);
    }

    /// `(bins, frames)` expected by [`Atgnn::forward`].
    pub fn input_shape(&self) -> (usize, usize) {
        (self.config.input_bins, self.config.input_frames)
    }

    /// Records the network on `tape` for one `[bins × frames]` log-mel image.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<ForwardPass> {
        let bound = self.params.bind(tape);
        self.forward_bound(tape, image, bound, None)
    }

    /// Forward with pre-bound parameters; `fixed` replays a recorded topology
    /// instead of rebuilding graphs from the features.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        bound: Bound,
        fixed: Option<&Topology>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (bins, frames) = self.input_shape();
        if image.shape() != (bins, frames) {
            return Err(Error::Shape(format!(
                "model input must be {bins}×{frames}, got {:?}",
                image.shape()
            )));
        }
        let mean = T::of(cfg.input_mean);
        let inv_std = T::one() / T::of(cfg.input_std);
        let flat = image.map(|v| (v - mean) * inv_std).reshape(1, bins * frames)?;
        let x = tape.constant(flat);
        let eps = T::of(cfg.norm_eps);

        let convs: Vec<(ValueId, ValueId)> = (0..cfg.stem_channels.len())
            .map(|i| (bound.get(&format!("stem.{i}.w")), bound.get(&format!("stem.{i}.b"))))
            .collect();
        let mut nodes = backbone_stem(tape, x, (bins, frames), &convs, bound.get("pos"))?;

        let mut topology = Topology::default();
        let mut layer = 0;
        let mut mlg = 0;
        let mut labels: Option<ValueId> = None;
        for stage in 0..cfg.stages() {
            for _ in 0..cfg.stage_pgn[stage] {
                let p = PgnBlockParams::from_bound(&bound, &format!("pgn.{layer}"));
                let (k, d) = (cfg.k_at(layer), cfg.dilation_at(layer, stage));
                let g = match fixed.and_then(|t| t.pgn.get(layer)) {
                    Some(g) => {
                        nodes = pgn_block_with_graph(tape, nodes, &p, g, eps)?;
                        g.clone()
                    }
                    None => {
                        let (next, g) = pgn_block(tape, nodes, &p, k, d, self.stage_bias[stage].as_ref(), eps)?;
                        nodes = next;
                        g
                    }
                };
                topology.pgn.push(g);
                layer += 1;
            }
            let emb = bound.get(&format!("labels.{stage}.emb"));
            let mut l = match labels {
                None => emb,
                Some(prev) => {
                    let carried = tape.matmul(prev, bound.get(&format!("labels.{stage}.proj")))?;
                    tape.add(emb, carried)?
                }
            };
            for _ in 0..cfg.stage_mlg[stage] {
                let w = bound.get(&format!("mlg.{mlg}.w_update"));
                let (refined, nbrs) = match fixed.and_then(|t| t.plg.get(mlg)) {
                    Some(nbrs) => (
                        plg_update(tape, l, nodes.features, w, nbrs, cfg.plg_difference)?,
                        nbrs.clone(),
                    ),
                    None => plg_block(
                        tape,
                        l,
                        nodes.features,
                        w,
                        cfg.k_plg.min(nodes.count()),
                        cfg.plg_difference,
                    )?,
                };
                topology.plg.push(nbrs);
                l = llg_block(tape, refined, bound.get(&format!("mlg.{mlg}.adj")))?;
                mlg += 1;
            }
            labels = Some(l);
            if stage + 1 < cfg.stages() {
                nodes = downsample(
                    tape,
                    nodes,
                    bound.get(&format!("down.{stage}.w")),
                    bound.get(&format!("down.{stage}.b")),
                )?;
            }
        }
        let labels = labels.expect("at least one stage");
        let head = HeadParams {
            w1: bound.get("head.w1"),
            b1: bound.get("head.b1"),
            w2: bound.get("head.w2"),
            b2: bound.get("head.b2"),
            readout: bound.get("head.readout"),
        };
        let yp = patch_logits(tape, nodes.features, &head)?;
        let yl = label_logits(tape, labels, head.readout)?;
        let logits = fused_logits(tape, yp, yl)?;
        Ok(ForwardPass {
            logits,
            patch_logits: yp,
            label_logits: yl,
            patches: nodes,
            labels,
            bound,
            topology,
        })
    }

    /// Per-class probabilities.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.logits(image)?.into_iter().map(|z| z.sigmoid()).collect())
    }

    /// Per-class pre-sigmoid scores.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, image)?;
        Ok(tape.data(fp.logits).data().to_vec())
    }

    /// `(patch logits, label logits)` for one input.
    pub fn predict_parts(&self, image: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, image)?;
        Ok((
            tape.data(fp.patch_logits).data().to_vec(),
            tape.data(fp.label_logits).data().to_vec(),
        ))
    }

    /// Mean BCE against `targets` and the gradient of every parameter.
    pub fn loss_and_grads(&self, image: &Tensor<T>, targets: &[T]) -> Result<(T, ParamStore<T>)> {
        if targets.len() != self.config.classes {
            return Err(Error::Shape(format!(
                "{} targets for {} classes",
                targets.len(),
                self.config.classes
            )));
        }
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, image)?;
        let t = Tensor::from_vec(1, targets.len(), targets.to_vec())?;
        let loss = tape.bce_with_logits(fp.logits, &t)?;
        tape.backward(loss)?;
        Ok((tape.data(loss).data()[0], self.params.grads_from(&tape, &fp.bound)))
    }

    /// Max relative error of the full-model loss gradient against central
    /// differences, with graph topology frozen at the unperturbed point.
    pub fn gradient_check(
        &self,
        image: &Tensor<T>,
        targets: &[T],
        eps: T,
    ) -> Result<crate::tensor::GradCheckReport<T>> {
        let mut probe = Tape::new();
        let topology = self.forward(&mut probe, image)?.topology;
        let keys: Vec<String> = self.params.keys().cloned().collect();
        let values: Vec<Tensor<T>> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let t = Tensor::from_vec(1, targets.len(), targets.to_vec())?;
        crate::tensor::check_gradient(&values, eps, |tape, ids| {
            let bound = Bound::from_pairs(keys.iter().cloned().zip(ids.iter().copied()));
            let fp = self.forward_bound(tape, image, bound, Some(&topology))?;
            tape.bce_with_logits(fp.logits, &t)
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(seed: u64, cfg: &ModelConfig) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.input_bins * cfg.input_frames;
        Tensor::from_vec(cfg.input_bins, cfg.input_frames, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn tiny_model_shapes() {
        let cfg = ModelConfig::tiny();
        let m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let fp = m.forward(&mut tape, &image(1, &cfg)).unwrap();
        assert_eq!(tape.shape(fp.logits), (1, cfg.classes));
        assert_eq!(tape.shape(fp.patches.features), (16, 32));
        assert_eq!(tape.shape(fp.labels), (cfg.classes, 32));
        assert_eq!(fp.topology.pgn.len(), 2);
        assert_eq!(fp.topology.plg.len(), 1);
        let p = m.predict(&image(1, &cfg)).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = ModelConfig::tiny();
        let a = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let b = Atgnn::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Atgnn::<f64>::new(ModelConfig { init_seed: 99, ..cfg }).unwrap();
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Atgnn::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(m.forward(&mut tape, &Tensor::zeros(64, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn from_params_checks_layout() {
        let m = Atgnn::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut p = m.params().clone();
        assert!(Atgnn::from_params(ModelConfig::tiny(), p.clone()).is_ok());
        p.insert("extra", Tensor::zeros(1, 1));
        assert!(Atgnn::from_params(ModelConfig::tiny(), p).is_err());
    }

    #[test]
    fn disabled_label_path_leaves_patch_logits() {
        let cfg = ModelConfig::tiny();
        let mut m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        m.disable_label_path();
        let x = image(2, &cfg);
        let (yp, yl) = m.predict_parts(&x).unwrap();
        assert!(yl.iter().all(|&v| v == 0.0));
        for (p, z) in m.predict(&x).unwrap().iter().zip(&yp) {
            assert!((p - z.sigmoid()).abs() <= 1e-12);
        }
    }

    #[test]
    fn replayed_topology_matches_dynamic_forward() {
        let cfg = ModelConfig::tiny();
        let m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let x = image(3, &cfg);
        let mut t1 = Tape::new();
        let a = m.forward(&mut t1, &x).unwrap();
        let mut t2 = Tape::new();
        let bound = m.params().bind(&mut t2);
        let b = m.forward_bound(&mut t2, &x, bound, Some(&a.topology)).unwrap();
        assert_eq!(t1.data(a.logits), t2.data(b.logits));
        assert_eq!(a.topology, b.topology);
    }

    #[test]
    fn pyramid_forward_runs() {
        let cfg = ModelConfig::tiny_pyramid();
        let m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let fp = m.forward(&mut tape, &image(4, &cfg)).unwrap();
        assert_eq!(tape.shape(fp.logits), (1, cfg.classes));
        assert_eq!(fp.topology.pgn.len(), 2);
        assert_eq!(fp.topology.plg.len(), 2);
    }

    #[test]
    fn pyramid_gradient_check() {
        let cfg = ModelConfig::tiny_pyramid();
        let m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let targets: Vec<f64> = (0..cfg.classes).map(|c| (c % 2) as f64).collect();
        let r = m.gradient_check(&image(5, &cfg), &targets, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn loss_gradients_cover_every_parameter() {
        let cfg = ModelConfig::tiny();
        let m = Atgnn::<f64>::new(cfg.clone()).unwrap();
        let targets = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (loss, g) = m.loss_and_grads(&image(6, &cfg), &targets).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.len(), m.params().len());
        for (k, t) in g.iter() {
            assert!(t.data().iter().any(|&v| v != 0.0), "no gradient reached {k}");
        }
        assert!(m.loss_and_grads(&image(6, &cfg), &targets[..3]).is_err());
    }
}
