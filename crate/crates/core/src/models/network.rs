use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, GROUP_NORM_EPS};
use crate::autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::scalar::Scalar;

fn glorot<S: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| S::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<S> {
    pub dense: Dense<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

/// Dense -> group norm -> ReLU blocks followed by a linear feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<S> {
    pub hidden: Vec<HiddenLayer<S>>,
    pub feature: Dense<S>,
    num_groups: usize,
}

/// Tape handles for one binding of a [`FeatureExtractor`].
#[derive(Debug, Clone)]
pub struct ExtractorVars {
    hidden: Vec<[Var; 4]>,
    feature: [Var; 2],
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.init_seed, Stream::ExtractorInit, 0);
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        for &h in &config.hidden_dims {
            hidden.push(HiddenLayer {
                dense: Dense::init(&mut rng, fan_in, h),
                gamma: Tensor::full(&[h], S::one()),
                beta: Tensor::zeros(&[h]),
            });
            fan_in = h;
        }
        Ok(Self {
            hidden,
            feature: Dense::init(&mut rng, fan_in, config.feature_dim),
            num_groups: config.num_groups,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(&self.feature, |l| &l.dense)
            .weight
            .shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.weight.shape()[1]
    }

    /// Records the parameters on `tape`; frozen bindings carry no gradient.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> ExtractorVars {
        let mut leaf = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let hidden = self
            .hidden
            .iter()
            .map(|l| {
                [
                    leaf(&l.dense.weight),
                    leaf(&l.dense.bias),
                    leaf(&l.gamma),
                    leaf(&l.beta),
                ]
            })
            .collect();
        let feature = [leaf(&self.feature.weight), leaf(&self.feature.bias)];
        ExtractorVars { hidden, feature }
    }

    pub fn forward(&self, tape: &mut Tape<S>, vars: &ExtractorVars, x: Var) -> Result<Var> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {d} columns, extractor expects {}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for [w, b, g, beta] in &vars.hidden {
            let z = tape.matmul(h, *w)?;
            let z = tape.add_row(z, *b)?;
            let z = tape.group_norm(z, self.num_groups, *g, *beta, S::of(GROUP_NORM_EPS))?;
            h = tape.relu(z)?;
        }
        let [w, b] = vars.feature;
        let z = tape.matmul(h, w)?;
        tape.add_row(z, b)
    }

    /// Moves this binding's gradients into the parameters' `grad` buffers.
    pub fn write_grads(&mut self, vars: &ExtractorVars, grads: &mut Gradients<S>) -> Result<()> {
        for (layer, [w, b, g, beta]) in self.hidden.iter_mut().zip(&vars.hidden) {
            grads.write_into(*w, &mut layer.dense.weight)?;
            grads.write_into(*b, &mut layer.dense.bias)?;
            grads.write_into(*g, &mut layer.gamma)?;
            grads.write_into(*beta, &mut layer.beta)?;
        }
        grads.write_into(vars.feature[0], &mut self.feature.weight)?;
        grads.write_into(vars.feature[1], &mut self.feature.bias)
    }

    /// `f_theta(x)` without recording gradients.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

impl<S: Scalar> ParamSet<S> for FeatureExtractor<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (i, l) in self.hidden.iter().enumerate() {
            f(&format!("theta.hidden{i}.weight"), &l.dense.weight);
            f(&format!("theta.hidden{i}.bias"), &l.dense.bias);
            f(&format!("theta.hidden{i}.gamma"), &l.gamma);
            f(&format!("theta.hidden{i}.beta"), &l.beta);
        }
        f("theta.feature.weight", &self.feature.weight);
        f("theta.feature.bias", &self.feature.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            f(&format!("theta.hidden{i}.weight"), &mut l.dense.weight);
            f(&format!("theta.hidden{i}.bias"), &mut l.dense.bias);
            f(&format!("theta.hidden{i}.gamma"), &mut l.gamma);
            f(&format!("theta.hidden{i}.beta"), &mut l.beta);
        }
        f("theta.feature.weight", &mut self.feature.weight);
        f("theta.feature.bias", &mut self.feature.bias);
    }
}

/// Linear task head `h_phi(z) = z W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S> {
    pub task_id: usize,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    weight: Var,
    bias: Var,
}

impl<S: Scalar> Head<S> {
    pub fn init(feature_dim: usize, classes: usize, task_id: usize, rng: &mut impl Rng) -> Self {
        Self {
            task_id,
            weight: glorot(rng, feature_dim, classes),
            bias: Tensor::zeros(&[classes]),
        }
    }

    /// Fresh head for `task_id` drawn from the model's seeded head stream.
    pub fn seeded(config: &ModelConfig, task_id: usize) -> Self {
        let mut rng = substream(config.init_seed, Stream::HeadInit, task_id as u64);
        Self::init(config.feature_dim, config.classes_per_task, task_id, &mut rng)
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> HeadVars {
        let (w, b) = (self.weight.clone(), self.bias.clone());
        if trainable {
            HeadVars {
                weight: tape.param(w),
                bias: tape.param(b),
            }
        } else {
            HeadVars {
                weight: tape.constant(w),
                bias: tape.constant(b),
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, vars: HeadVars, z: Var) -> Result<Var> {
        let y = tape.matmul(z, vars.weight)?;
        tape.add_row(y, vars.bias)
    }

    pub fn write_grads(&mut self, vars: HeadVars, grads: &mut Gradients<S>) -> Result<()> {
        grads.write_into(vars.weight, &mut self.weight)?;
        grads.write_into(vars.bias, &mut self.bias)
    }

    /// Logits for precomputed features.
    pub fn logits(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(features.clone());
        let out = self.forward(&mut tape, vars, z)?;
        Ok(tape.value(out).clone())
    }
}

impl<S: Scalar> ParamSet<S> for Head<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f(&format!("head{}.weight", self.task_id), &self.weight);
        f(&format!("head{}.bias", self.task_id), &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f(&format!("head{}.weight", self.task_id), &mut self.weight);
        f(&format!("head{}.bias", self.task_id), &mut self.bias);
    }
}

/// Feature extractor plus the registry of per-task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor<S>,
    pub heads: BTreeMap<usize, Head<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn head(&self, task: usize) -> Result<&Head<S>> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Usage(format!("no head registered for task {task}")))
    }

    pub fn head_mut(&mut self, task: usize) -> Result<&mut Head<S>> {
        self.heads
            .get_mut(&task)
            .ok_or_else(|| Error::Usage(format!("no head registered for task {task}")))
    }

    /// Registers a freshly initialized head for `task`, replacing any old one.
    pub fn add_head(&mut self, task: usize) -> &mut Head<S> {
        self.heads.insert(task, Head::seeded(&self.config, task));
        self.heads.get_mut(&task).expect("just inserted")
    }

    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.extractor.features(x)
    }

    pub fn predict(&self, task: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        let head = self.head(task)?;
        head.logits(&self.extractor.features(x)?)
    }
}

impl<S: Scalar> ParamSet<S> for Model<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.extractor.visit_params(f);
        for h in self.heads.values() {
            h.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.extractor.visit_params_mut(f);
        for h in self.heads.values_mut() {
            h.visit_params_mut(f);
        }
    }
}

/// Random feature extractor and an empty head registry.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<Model<S>> {
    Ok(Model {
        config: config.clone(),
        extractor: FeatureExtractor::init(config)?,
        heads: BTreeMap::new(),
    })
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.shape()[logits.shape().len() - 1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// SHA-256 over parameter names, shapes and raw bits.
pub fn param_digest<S: Scalar>(params: &dyn ParamSet<S>) -> String {
    let mut hasher = Sha256::new();
    params.visit_params(&mut |name, t| {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.as_f64().to_bits().to_le_bytes());
        }
    });
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dims: vec![8, 4],
            feature_dim: 3,
            num_groups: 2,
            classes_per_task: 2,
            init_seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f64>(&small()).unwrap();
        let b = init_model::<f64>(&small()).unwrap();
        assert_eq!(param_digest(&a), param_digest(&b));
        let c = init_model::<f64>(&ModelConfig { init_seed: 12, ..small() }).unwrap();
        assert_ne!(param_digest(&a), param_digest(&c));
    }

    #[test]
    fn glorot_bound_for_64_to_32() {
        let cfg = ModelConfig {
            input_dim: 64,
            hidden_dims: vec![32],
            feature_dim: 8,
            num_groups: 8,
            classes_per_task: 2,
            init_seed: 3,
        };
        let m = init_model::<f64>(&cfg).unwrap();
        let bound = (6.0f64 / 96.0).sqrt();
        assert!((bound - 0.25).abs() < 1e-12);
        assert!(m.extractor.hidden[0].dense.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(m.extractor.hidden[0].gamma.data().iter().all(|&g| g == 1.0));
        assert!(m.extractor.hidden[0].beta.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mut m = init_model::<f64>(&small()).unwrap();
        m.add_head(0);
        let cfg = small();
        // 6*8 + 3*8, 8*4 + 3*4, 4*3 + 3
        assert_eq!(cfg.extractor_param_count(), 72 + 44 + 15);
        assert_eq!(m.extractor.param_count(), cfg.extractor_param_count());
        let mut total = 0;
        m.visit_params(&mut |_, t| total += t.len());
        assert_eq!(total, cfg.extractor_param_count() + cfg.head_param_count());
    }

    #[test]
    fn zero_feature_layer_gives_zero_features() {
        let mut m = init_model::<f64>(&small()).unwrap();
        m.extractor.feature.weight.data_mut().fill(0.0);
        let x = Tensor::new(vec![5, 6], (0..30).map(|v| v as f64 * 0.1).collect()).unwrap();
        let f = m.features(&x).unwrap();
        assert_eq!(f.shape(), &[5, 3]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_bias() {
        let mut m = init_model::<f64>(&small()).unwrap();
        let h = m.add_head(4);
        h.weight.data_mut().fill(0.0);
        h.bias.data_mut().copy_from_slice(&[0.5, -1.0]);
        let x = Tensor::new(vec![2, 6], vec![0.3; 12]).unwrap();
        let logits = m.predict(4, &x).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 0.5, -1.0]);
        assert!(matches!(m.predict(5, &x), Err(Error::Usage(_))));
    }

    #[test]
    fn logits_match_hand_arithmetic() {
        let mut m = init_model::<f64>(&small()).unwrap();
        let x = Tensor::new(vec![2, 6], (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
        let f = m.features(&x).unwrap();
        let h = m.add_head(0);
        h.bias.data_mut().copy_from_slice(&[0.25, -0.5]);
        let (w, b) = (h.weight.clone(), h.bias.clone());
        let logits = m.predict(0, &x).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let manual: f64 =
                    (0..3).map(|j| f.row(r)[j] * w.data()[j * 2 + c]).sum::<f64>() + b.data()[c];
                assert!((logits.row(r)[c] - manual).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_permutation_commutes_with_features() {
        let m = init_model::<f64>(&small()).unwrap();
        let x = Tensor::new(vec![4, 6], (0..24).map(|v| ((v * 7) % 11) as f64 - 5.0).collect())
            .unwrap();
        let perm = [2, 0, 3, 1];
        let f = m.features(&x).unwrap();
        let fp = m.features(&x.select_rows(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(fp.row(i), f.row(p));
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut m = init_model::<f64>(&small()).unwrap();
        m.add_head(0);
        let before = m.clone();
        let x = Tensor::new(vec![3, 6], vec![0.7; 18]).unwrap();
        let a = m.predict(0, &x).unwrap();
        let b = m.predict(0, &x).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(m, before);
    }

    #[test]
    fn works_in_f32() {
        let m = init_model::<f32>(&small()).unwrap();
        let x = Tensor::<f32>::new(vec![2, 6], vec![0.1; 12]).unwrap();
        assert_eq!(m.features(&x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn rejects_indivisible_groups() {
        let cfg = ModelConfig { hidden_dims: vec![6], num_groups: 4, ..small() };
        assert!(matches!(init_model::<f64>(&cfg), Err(Error::Config(_))));
    }
}
