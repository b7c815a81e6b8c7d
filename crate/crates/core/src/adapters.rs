//! Freeze policies that turn a pretrained parameter store into an
//! adaptation run: full fine-tuning, or training only the SE blocks, the
//! main-path BN affine parameters, or both, in a chosen subset of groups.

use std::fmt;
use std::str::FromStr;

use crate::autograd::BnStats;
use crate::autograd::Tape;
use crate::error::{contract_err, Error, Result};
use crate::model::names::{group_of, is_bn_adapter_param, is_main_bn_layer, is_se_param};
use crate::model::{BnMode, BnPlan, Forward, ParameterStore, SpeakerNet};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    FineTune,
    Se,
    Bn,
    SeBn,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 4] = [AdaptMode::FineTune, AdaptMode::Se, AdaptMode::Bn, AdaptMode::SeBn];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::FineTune => "fine_tune",
            AdaptMode::Se => "se",
            AdaptMode::Bn => "bn",
            AdaptMode::SeBn => "se_bn",
        }
    }

    fn trains_se(self) -> bool {
        matches!(self, AdaptMode::Se | AdaptMode::SeBn)
    }

    fn trains_bn(self) -> bool {
        matches!(self, AdaptMode::Bn | AdaptMode::SeBn)
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown adapt mode {s:?} (expected fine_tune, se, bn or se_bn)"
            ))
        })
    }
}

/// Subset of the four residual groups, stored as bits 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const ALL: GroupMask = GroupMask(0b1111);

    /// Mask from 1-based group numbers.
    pub fn from_groups(groups: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &g in groups {
            if !(1..=4).contains(&g) {
                return Err(Error::Config(format!("group {g} outside 1..=4")));
            }
            bits |= 1 << (g - 1);
        }
        Ok(Self(bits))
    }

    pub fn contains(self, group: usize) -> bool {
        (1..=4).contains(&group) && self.0 & (1 << (group - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn groups(self) -> Vec<usize> {
        (1..=4).filter(|&g| self.contains(g)).collect()
    }
}

impl fmt::Display for GroupMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups().iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `all`, `1,3`, `G1,G2` or a range such as `G1-G4` / `2-3`.
impl FromStr for GroupMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let num = |p: &str| -> Result<usize> {
            let p = p.trim();
            let p = p.strip_prefix(['G', 'g']).unwrap_or(p);
            p.parse()
                .map_err(|_| Error::Config(format!("bad group {p:?} in {s:?}")))
        };
        let mut groups = Vec::new();
        for part in s.split(',') {
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(Error::Config(format!("empty group range {part:?}")));
                    }
                    groups.extend(a..=b);
                }
                None => groups.push(num(part)?),
            }
        }
        Self::from_groups(&groups)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptPolicy {
    pub mode: AdaptMode,
    pub groups: GroupMask,
    /// Re-estimate running statistics of adapted BN layers on adaptation data.
    pub bn_stats_refresh: bool,
}

impl AdaptPolicy {
    pub fn new(mode: AdaptMode, groups: GroupMask, bn_stats_refresh: bool) -> Result<Self> {
        let p = Self {
            mode,
            groups,
            bn_stats_refresh,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != AdaptMode::FineTune && self.groups.is_empty() {
            return Err(Error::Config(format!(
                "adapt mode {} needs at least one group",
                self.mode
            )));
        }
        Ok(())
    }

    /// Whether the named parameter is trainable under this policy.
    pub fn selects(&self, name: &str) -> bool {
        if self.mode == AdaptMode::FineTune {
            return true;
        }
        let in_mask = group_of(name).is_some_and(|g| self.groups.contains(g));
        in_mask
            && ((self.mode.trains_se() && is_se_param(name)) || (self.mode.trains_bn() && is_bn_adapter_param(name)))
    }

    /// Whether a BN layer's affine parameters are adapted under this policy.
    pub fn adapts_bn_layer(&self, layer: &str) -> bool {
        self.mode.trains_bn() && is_main_bn_layer(layer) && group_of(layer).is_some_and(|g| self.groups.contains(g))
    }

    /// Per-layer BN behavior during adaptation training. Fine-tuning trains
    /// every layer; adapter modes keep non-adapted layers on running stats.
    pub fn bn_plan(&self, net: &SpeakerNet) -> BnPlan {
        if self.mode == AdaptMode::FineTune {
            return BnPlan::train();
        }
        let adapted = BnMode::Train {
            update_stats: self.bn_stats_refresh,
        };
        net.bn_layers()
            .into_iter()
            .filter(|(l, _)| self.adapts_bn_layer(l))
            .fold(BnPlan::eval(), |plan, (l, _)| plan.with(l, adapted))
    }
}

/// Sets every trainable flag in `store` to the policy's selection.
pub fn apply_policy<E: Element>(net: &SpeakerNet, store: &mut ParameterStore<E>, policy: &AdaptPolicy) -> Result<()> {
    policy.validate()?;
    net.check_store(store)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        store.set_trainable(n, policy.selects(n))?;
    }
    if store.trainable_count() == 0 {
        return Err(contract_err!(
            "policy {} @ {} selects no parameters",
            policy.mode,
            policy.groups
        ));
    }
    Ok(())
}

/// Largest absolute change over parameters that are frozen in `after`.
pub fn frozen_drift_check<E: Element>(before: &ParameterStore<E>, after: &ParameterStore<E>) -> Result<f64> {
    before.check_same_names(after)?;
    let mut worst = 0.0f64;
    for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
        if b.requires_grad() {
            continue;
        }
        if a.shape() != b.shape() {
            return Err(contract_err!("shape changed for a frozen parameter"));
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    Ok(worst)
}

/// Re-estimates the running statistics of the policy's adapted BN layers as a
/// cumulative average over `batches` (each `[N,1,F,T]`). Other layers run on
/// their stored statistics; no parameter changes. A disabled refresh is a no-op.
pub fn bn_stats_refresh<E: Element>(
    net: &SpeakerNet,
    store: &mut ParameterStore<E>,
    policy: &AdaptPolicy,
    batches: &[Tensor<E>],
) -> Result<()> {
    if batches.is_empty() {
        return Err(contract_err!("bn_stats_refresh needs at least one batch"));
    }
    if !policy.bn_stats_refresh {
        return Ok(());
    }
    let layers: Vec<String> = net
        .bn_layers()
        .into_iter()
        .map(|(l, _)| l)
        .filter(|l| policy.mode == AdaptMode::FineTune || policy.adapts_bn_layer(l))
        .collect();
    refresh_layers(net, store, &layers, batches)
}

/// Re-estimates the statistics of every BN layer, stem and shortcut layers
/// included, on target-domain batches. Runs before training when the policy
/// adapts BN layers and has the refresh enabled, so that the adapted affine
/// parameters are fit on target-normalized activations. Only running
/// statistics change; a policy without adapted BN layers is a no-op.
pub fn align_bn_stats<E: Element>(
    net: &SpeakerNet,
    store: &mut ParameterStore<E>,
    policy: &AdaptPolicy,
    batches: &[Tensor<E>],
) -> Result<()> {
    if batches.is_empty() {
        return Err(contract_err!("align_bn_stats needs at least one batch"));
    }
    let adapts_bn = policy.mode == AdaptMode::FineTune || policy.mode.trains_bn();
    if !policy.bn_stats_refresh || !adapts_bn {
        return Ok(());
    }
    let layers: Vec<String> = net.bn_layers().into_iter().map(|(l, _)| l).collect();
    refresh_layers(net, store, &layers, batches)
}

/// Cumulative re-estimation of the listed layers' statistics; every other layer
/// normalizes with its stored statistics.
pub fn refresh_layers<E: Element>(
    net: &SpeakerNet,
    store: &mut ParameterStore<E>,
    layers: &[String],
    batches: &[Tensor<E>],
) -> Result<()> {
    let update = BnMode::Train { update_stats: true };
    let plan = layers
        .iter()
        .fold(BnPlan::eval(), |plan, l| plan.with(l.clone(), update));
    let mut fresh: Vec<(String, BnStats<E>)> = layers
        .iter()
        .map(|l| {
            let c = store
                .bn_stats(l)
                .ok_or_else(|| contract_err!("unknown batch-norm layer {l}"))?
                .channels();
            Ok((l.clone(), BnStats::new(c)))
        })
        .collect::<Result<_>>()?;
    for x in batches {
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let mut f = Forward::new(&mut tape, store, &vars, &plan, net.config().bn_eps);
        net.backbone_forward(&mut f, xv)?;
        for (layer, m) in f.updates {
            let slot = fresh
                .iter_mut()
                .find(|(l, _)| *l == layer)
                .map(|(_, s)| s)
                .ok_or_else(|| contract_err!("unexpected update for {layer}"))?;
            slot.update(&m.mean, &m.var_unbiased, None);
        }
    }
    for (layer, st) in fresh {
        *store
            .bn_stats_mut(&layer)
            .ok_or_else(|| contract_err!("unknown batch-norm layer {layer}"))? = st;
    }
    Ok(())
}
