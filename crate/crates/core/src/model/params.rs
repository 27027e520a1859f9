//! Parameter layout, storage and initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::IffArchConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const BRANCHES: [&str; 2] = ["enh", "noisy"];

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform, bound `sqrt(6 / fan_in)`.
    ConvWeight {
        fan_in: usize,
    },
    /// Uniform in `±1 / sqrt(fan_in)`.
    ConvBias {
        fan_in: usize,
    },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Learnable tensors and batch-norm running statistics, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<ParamSpec>,
    /// `(path, channels)` of each batch-norm layer.
    pub norms: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn new(cfg: &IffArchConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let c = cfg.filters;
        for br in BRANCHES {
            b.conv_bn_prelu(&format!("{br}.up"), c, 1, cfg.upconv_kernel);
        }
        for i in 0..cfg.blocks {
            for br in BRANCHES {
                let ra = format!("{br}.ra{i}");
                for j in 0..2 {
                    let res = format!("{ra}.res{j}");
                    b.conv(&format!("{res}.conv1"), c, c, cfg.ra_kernel);
                    b.bn(&format!("{res}.bn1"), c);
                    b.conv(&format!("{res}.conv2"), c, c, cfg.ra_kernel);
                    b.bn(&format!("{res}.bn2"), c);
                    b.prelu(&format!("{res}.prelu"), c);
                }
                b.conv(&format!("{ra}.mix"), c, 3 * c, 1);
            }
            for dir in ["n2e", "e2n"] {
                let p = format!("inter{i}.{dir}");
                b.conv(&format!("{p}.conv"), c, 2 * c, cfg.interaction_kernel);
                b.bn(&format!("{p}.bn"), c);
            }
        }
        for br in BRANCHES {
            b.conv_bn_prelu(&format!("{br}.dn"), 1, c, cfg.upconv_kernel);
        }
        let m = cfg.merge_filters;
        b.conv("merge.conv1", m, 4, cfg.merge_kernel);
        b.conv("merge.conv2", 1, m, cfg.merge_kernel);
        ParamLayout {
            params: b.params,
            norms: b.norms,
        }
    }
}

#[derive(Default)]
struct LayoutBuilder {
    params: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl LayoutBuilder {
    fn push(&mut self, path: String, shape: Vec<usize>, init: Init) {
        self.params.push(ParamSpec { path, shape, init });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k;
        self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, k, k],
            Init::ConvWeight { fan_in },
        );
        self.push(
            format!("{prefix}.bias"),
            vec![cout],
            Init::ConvBias { fan_in },
        );
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], Init::Const(1.0));
        self.push(format!("{prefix}.beta"), vec![c], Init::Const(0.0));
        self.norms.push((prefix.to_string(), c));
    }

    fn prelu(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.slope"), vec![c], Init::Const(0.25));
    }

    fn conv_bn_prelu(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.conv(&format!("{prefix}.conv"), cout, cin, k);
        self.bn(&format!("{prefix}.bn"), cout);
        self.prelu(&format!("{prefix}.prelu"), cout);
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deterministic initialization of every tensor in `layout` from `seed`.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in &layout.params {
            let t = match spec.init {
                Init::ConvWeight { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
                }
                Init::ConvBias { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
                }
                Init::Const(v) => Tensor::full(&spec.shape, T::from_f64_lossy(v)),
            };
            store.insert(&spec.path, t);
        }
        store
    }

    /// Inserts or replaces `path`.
    pub fn insert(&mut self, path: &str, value: Tensor<T>) {
        match self.index.get(path) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(path.to_string(), self.entries.len());
                self.entries.push((path.to_string(), value));
            }
        }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.index
            .get(path)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(path) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::UnknownParam(path.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(p, t)| (p.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(p, t)| (p.as_str(), t))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    /// Number of scalar learnables.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalar learnables under a dotted path prefix (`"enh.ra0"` matches
    /// `enh.ra0.*` but not `enh.ra01.*`).
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(p, _)| {
                prefix.is_empty()
                    || p == prefix
                    || (p.starts_with(prefix) && p.as_bytes().get(prefix.len()) == Some(&b'.'))
            })
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (p, t) in self.iter() {
            out.insert(p, t.cast());
        }
        out
    }

    /// Records every tensor on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars::from_pairs(
            self.entries
                .iter()
                .map(|(p, t)| (p.clone(), tape.param(t.clone()))),
        )
    }
}

/// Batch-norm running statistics keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferStore<T> {
    stats: HashMap<String, RunningStats<T>>,
}

impl<T: Scalar> BufferStore<T> {
    pub fn new(layout: &ParamLayout) -> Self {
        Self {
            stats: layout
                .norms
                .iter()
                .map(|(p, c)| (p.clone(), RunningStats::new(*c)))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            stats: HashMap::new(),
        }
    }

    pub fn get(&self, path: &str) -> Result<&RunningStats<T>> {
        self.stats
            .get(path)
            .ok_or_else(|| Error::UnknownParam(format!("{path} (running stats)")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut RunningStats<T>> {
        self.stats
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(format!("{path} (running stats)")))
    }

    pub fn insert(&mut self, path: &str, stats: RunningStats<T>) {
        self.stats.insert(path.to_string(), stats);
    }

    pub fn cast<U: Scalar>(&self) -> BufferStore<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        BufferStore {
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles for parameters, by path.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut out = Self::default();
        for (p, v) in pairs {
            out.order.push(p.clone());
            out.vars.insert(p, v);
        }
        out
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|p| (p.as_str(), self.vars[p]))
    }
}

/// Closed-form learnable count for [`ParamLayout::new`].
pub fn param_count(cfg: &IffArchConfig) -> usize {
    ParamLayout::new(cfg)
        .params
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}
