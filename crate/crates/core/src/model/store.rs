//! Named parameters, trainable flags and batch-norm running statistics.

use indexmap::IndexMap;

use crate::autograd::{BatchMoments, BnStats, Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Ordered name → tensor map. A tensor's `requires_grad` flag is its
/// trainable flag. Batch-norm running statistics live alongside, keyed by
/// layer name, and are not parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<E> {
    params: IndexMap<String, Tensor<E>>,
    bn: IndexMap<String, BnStats<E>>,
}

impl<E: Element> Default for ParameterStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParameterStore<E> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            bn: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn insert_bn(&mut self, layer: impl Into<String>, stats: BnStats<E>) -> Result<()> {
        let layer = layer.into();
        if self.bn.contains_key(&layer) {
            return Err(contract_err!("duplicate batch-norm layer {layer}"));
        }
        self.bn.insert(layer, stats);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.params.get(name).map(Tensor::requires_grad)
    }

    pub fn set_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))?
            .set_requires_grad(flag);
        Ok(())
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.params.values_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect()
    }

    /// Total elements over parameters whose name satisfies `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.count(|_| true)
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = (&str, &BnStats<E>)> {
        self.bn.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn bn_stats(&self, layer: &str) -> Option<&BnStats<E>> {
        self.bn.get(layer)
    }

    pub fn bn_stats_mut(&mut self, layer: &str) -> Option<&mut BnStats<E>> {
        self.bn.get_mut(layer)
    }

    /// Seeds every unseeded layer with zero mean and unit variance.
    pub fn seed_bn_stats(&mut self) {
        for st in self.bn.values_mut() {
            if !st.is_ready() {
                let c = st.channels();
                *st = BnStats::seeded(vec![E::zero(); c], vec![E::one(); c]);
            }
        }
    }

    /// Folds batch moments collected during a forward pass into running stats.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchMoments<E>)], momentum: Option<E>) -> Result<()> {
        for (layer, m) in updates {
            let st = self
                .bn
                .get_mut(layer)
                .ok_or_else(|| contract_err!("unknown batch-norm layer {layer}"))?;
            st.update(&m.mean, &m.var_unbiased, momentum);
        }
        Ok(())
    }

    /// Registers every parameter on `tape` as a leaf, honoring trainable flags.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        let vars = self.params.iter().map(|(n, t)| (n.clone(), tape.input(t))).collect();
        Bound { vars }
    }

    /// Registers every parameter as a non-differentiable constant.
    pub fn bind_frozen(&self, tape: &mut Tape<E>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), false)))
            .collect();
        Bound { vars }
    }

    /// Adds tape gradients of trainable leaves into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape<E>, bound: &Bound) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = bound.vars.get(name).and_then(|&v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Converts every tensor and statistic to another float type.
    pub fn cast<F: Element>(&self) -> ParameterStore<F> {
        let conv = |v: &[E]| v.iter().map(|x| F::from_f64_lossy(x.as_f64())).collect::<Vec<F>>();
        ParameterStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BnStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            num_batches: s.num_batches,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Errors unless both stores hold the same parameter names in the same order.
    pub fn check_same_names(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() || self.names().zip(other.names()).any(|(a, b)| a != b) {
            return Err(Error::Contract("parameter name sets differ".into()));
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pairs names with existing tape handles.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("unknown parameter {name}"))
    }
}
