//! Named parameter collections and their tape registration.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// All learnable tensors, keyed by a dotted path. BTreeMap keeps iteration
/// in sorted name order, which makes optimizer sweeps and checkpoint
/// manifests deterministic.
pub type ParamSet = BTreeMap<String, Tensor>;

/// The three-way parameter split used by checkpoints and the training
/// objective: stem+transformer, multi-scale fusion, decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// CNN stem plus the transformer (embedding, layers, projection).
    Encoder,
    /// Multi-scale fusion branches and the fusion pyramid.
    Msf,
    /// Decoder convolutions and the classification head.
    Decoder,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Msf => "msf",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(ParamGroup::Encoder),
            "msf" => Some(ParamGroup::Msf),
            "decoder" => Some(ParamGroup::Decoder),
            _ => None,
        }
    }
}

/// Group membership is encoded in the name prefix.
pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("msf.") {
        ParamGroup::Msf
    } else if name.starts_with("dec.") {
        ParamGroup::Decoder
    } else {
        ParamGroup::Encoder
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He initialization for conv kernels feeding ReLU stacks.
    ConvFanIn { fan_in: usize },
    /// 1/sqrt(fan_in) for linear projections.
    LinearFanIn { fan_in: usize },
    /// Small-sigma Gaussian for the positional table.
    Normal { std: f64 },
    Ones,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn group(&self) -> ParamGroup {
        group_of(&self.name)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Materialize parameters from their specs. Draw order follows the spec
/// list, with one RNG stream, so a given (specs, seed) pair always produces
/// the same tensors.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for spec in specs {
        let t = match spec.init {
            Init::ConvFanIn { fan_in } => {
                Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            }
            Init::LinearFanIn { fan_in } => {
                Tensor::randn(&spec.shape, (1.0 / fan_in as f64).sqrt(), &mut rng)
            }
            Init::Normal { std } => Tensor::randn(&spec.shape, std, &mut rng),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::Zeros => Tensor::zeros(&spec.shape),
        };
        set.insert(spec.name.clone(), t);
    }
    set
}

/// Lazily registers parameters as tape leaves during a forward pass and
/// remembers the node ids so gradients can be read back by name.
pub struct ParamCtx<'a> {
    set: &'a ParamSet,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> ParamCtx<'a> {
    pub fn new(set: &'a ParamSet) -> Self {
        ParamCtx {
            set,
            ids: BTreeMap::new(),
        }
    }

    /// Node id for a named parameter, registering it on first use.
    pub fn node(&mut self, tape: &mut Tape, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let tensor = self
            .set
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not found"))
            .clone();
        let id = tape.leaf(tensor);
        self.ids.insert(name.to_string(), id);
        id
    }

    /// Names and node ids of every parameter touched by the forward pass.
    pub fn registered(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
