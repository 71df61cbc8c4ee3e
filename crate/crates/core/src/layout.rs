//! The full parameter list of a model, as names, shapes and roles.
//!
//! Model construction and trainable-parameter counting both walk the same
//! list, so counting a full-size configuration needs no allocation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::config::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;

/// What part of the model a parameter belongs to; decides trainability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    /// Encoder layer by 0-based index (0 is closest to the embeddings).
    Layer(usize),
    Pooler,
    Head,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], role: ParamRole, init: Init) -> Self {
        Self {
            name,
            shape: shape.to_vec(),
            role,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Whether a parameter with `role` is trained when the top `k` of
/// `num_layers` encoder layers are fine-tuned.
///
/// Embeddings only train when the whole encoder does. The pooler trains with
/// any encoder layer; it is part of the pretrained encoder's parameter set
/// even though neither head reads it.
pub fn role_trainable(role: ParamRole, k: usize, num_layers: usize) -> bool {
    match role {
        ParamRole::Embedding => k == num_layers && k > 0,
        ParamRole::Layer(i) => i + k >= num_layers,
        ParamRole::Pooler => k >= 1,
        ParamRole::Head | ParamRole::Classifier => true,
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("encoder.layer.{i}")
}

pub fn filter_prefix(width: usize, j: usize) -> String {
    format!("head.cnn.width{width}.filter{j}")
}

/// Every parameter of a model built from `config`, in registry order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    use Init::*;
    use ParamRole::*;
    let e = &config.encoder;
    let d = e.embed_dim;
    let mut specs = vec![
        ParamSpec::new("embeddings.token_table".into(), &[e.vocab_size, d], Embedding, Normal),
        ParamSpec::new(
            "embeddings.position_table".into(),
            &[e.max_position, d],
            Embedding,
            Normal,
        ),
        ParamSpec::new("embeddings.segment_table".into(), &[2, d], Embedding, Normal),
        ParamSpec::new("embeddings.layer_norm.gamma".into(), &[d], Embedding, Ones),
        ParamSpec::new("embeddings.layer_norm.beta".into(), &[d], Embedding, Zeros),
    ];
    for i in 0..e.num_layers {
        let p = layer_prefix(i);
        let role = Layer(i);
        for proj in ["q", "k", "v", "o"] {
            specs.push(ParamSpec::new(format!("{p}.attention.W_{proj}"), &[d, d], role, Normal));
            specs.push(ParamSpec::new(format!("{p}.attention.b_{proj}"), &[d], role, Zeros));
        }
        specs.push(ParamSpec::new(
            format!("{p}.attention.layer_norm.gamma"),
            &[d],
            role,
            Ones,
        ));
        specs.push(ParamSpec::new(
            format!("{p}.attention.layer_norm.beta"),
            &[d],
            role,
            Zeros,
        ));
        specs.push(ParamSpec::new(format!("{p}.ffn.W_in"), &[d, e.ffn_dim], role, Normal));
        specs.push(ParamSpec::new(format!("{p}.ffn.b_in"), &[e.ffn_dim], role, Zeros));
        specs.push(ParamSpec::new(format!("{p}.ffn.W_out"), &[e.ffn_dim, d], role, Normal));
        specs.push(ParamSpec::new(format!("{p}.ffn.b_out"), &[d], role, Zeros));
        specs.push(ParamSpec::new(format!("{p}.ffn.layer_norm.gamma"), &[d], role, Ones));
        specs.push(ParamSpec::new(format!("{p}.ffn.layer_norm.beta"), &[d], role, Zeros));
    }
    specs.push(ParamSpec::new("encoder.pooler.weight".into(), &[d, d], Pooler, Normal));
    specs.push(ParamSpec::new("encoder.pooler.bias".into(), &[d], Pooler, Zeros));
    if config.head == HeadKind::Cnn {
        for &g in &config.cnn.widths {
            for j in 0..config.cnn.filters_per_width {
                let p = filter_prefix(g, j);
                specs.push(ParamSpec::new(format!("{p}.weight"), &[g, d], Head, Normal));
                specs.push(ParamSpec::new(format!("{p}.bias"), &[1], Head, Zeros));
            }
        }
    }
    let input = config.classifier_input_dim();
    specs.push(ParamSpec::new(
        "classifier.weight".into(),
        &[input, 2],
        Classifier,
        Normal,
    ));
    specs.push(ParamSpec::new("classifier.bias".into(), &[2], Classifier, Zeros));
    specs
}

/// Trainable element count for `config` with the top `k` layers fine-tuned,
/// computed from shapes alone.
pub fn count_trainable_for(config: &ModelConfig, k: usize) -> usize {
    let layers = config.encoder.num_layers;
    param_specs(config)
        .iter()
        .filter(|s| role_trainable(s.role, k, layers))
        .map(ParamSpec::numel)
        .sum()
}

/// Normal(0, std) draws, redrawn until within two standard deviations.
pub fn truncated_normal(n: usize, std: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
    Ok((0..n)
        .map(|_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect())
}

/// Allocates and initialises every parameter of `config`, then applies the
/// trainability implied by `config.trainable_encoders`.
pub fn build_registry(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamRegistry> {
    config.validate()?;
    let mut reg = ParamRegistry::new();
    let layers = config.encoder.num_layers;
    for spec in param_specs(config) {
        let n = spec.numel();
        let mut data = match spec.init {
            Init::Normal => truncated_normal(n, config.init_std, rng)?,
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        config.precision.round(&mut data);
        let trainable = role_trainable(spec.role, config.trainable_encoders, layers);
        reg.insert(spec.name, Tensor::new(&spec.shape, data)?.with_requires_grad(trainable))?;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Setup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let specs = param_specs(&ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn));
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn roles() {
        assert!(!role_trainable(ParamRole::Embedding, 11, 12));
        assert!(role_trainable(ParamRole::Embedding, 12, 12));
        assert!(role_trainable(ParamRole::Layer(8), 4, 12));
        assert!(!role_trainable(ParamRole::Layer(7), 4, 12));
        assert!(!role_trainable(ParamRole::Pooler, 0, 12));
        assert!(role_trainable(ParamRole::Head, 0, 12));
    }

    #[test]
    fn k_zero_counts_only_head_and_classifier() {
        let c = ModelConfig::tiny(Setup::Siamese, HeadKind::Cnn);
        // widths 2,3 with two filters each over d=16, classifier 8->2
        let head = 2 * (2 * 16 + 1) + 2 * (3 * 16 + 1);
        assert_eq!(count_trainable_for(&c, 0), head + 8 * 2 + 2);
    }

    #[test]
    fn registry_matches_specs() {
        let c = ModelConfig::tiny(Setup::MatchedAggregation, HeadKind::Cnn);
        let reg = build_registry(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let specs = param_specs(&c);
        assert_eq!(reg.len(), specs.len());
        for (spec, (name, t)) in specs.iter().zip(reg.iter()) {
            assert_eq!(spec.name, name);
            assert_eq!(spec.shape, t.shape());
        }
        assert_eq!(reg.trainable_count(), count_trainable_for(&c, c.trainable_encoders));
        let bound = 2.0 * c.init_std;
        assert!(reg
            .get("embeddings.token_table")
            .unwrap()
            .data()
            .iter()
            .all(|x| x.abs() <= bound));
        assert!(reg.get("classifier.bias").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(reg
            .get("embeddings.layer_norm.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn f32_precision_rounds_init() {
        let c = ModelConfig::tiny(Setup::Siamese, HeadKind::MeanPool);
        assert_eq!(c.precision, crate::config::Precision::F32);
        let reg = build_registry(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (_, t) in reg.iter() {
            assert!(t.data().iter().all(|&x| x as f32 as f64 == x));
        }
    }
}
