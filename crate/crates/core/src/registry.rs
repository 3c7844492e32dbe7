//! Name-keyed factories for token selectors and eviction policies.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::memory::{DegradationPolicy, EvictionPolicy, RetainAllPolicy};
use crate::visual::{AdaptiveSelector, KeepAllSelector, ManualSelector, TokenSelector};

/// Tunables a factory may read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyParams {
    /// Fixed threshold for the manual selector.
    pub k: f64,
    /// Degradation threshold for the eviction policy.
    pub m: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            k: crate::visual::DEFAULT_MANUAL_K,
            m: crate::memory::DEFAULT_DEGRADATION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} {name:?} (known: {})", known.join(", "))]
pub struct UnknownStrategy {
    pub kind: &'static str,
    pub name: String,
    pub known: Vec<String>,
}

type SelectorFactory = Box<dyn Fn(&StrategyParams) -> Box<dyn TokenSelector> + Send + Sync>;
type PolicyFactory = Box<dyn Fn(&StrategyParams) -> Box<dyn EvictionPolicy> + Send + Sync>;

pub struct StrategyRegistry {
    selectors: BTreeMap<String, SelectorFactory>,
    policies: BTreeMap<String, PolicyFactory>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            selectors: BTreeMap::new(),
            policies: BTreeMap::new(),
        }
    }

    /// Registry holding `adaptive`, `manual`, `keep-all` selectors and
    /// `degradation`, `retain-all` policies.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_selector("adaptive", |_| Box::new(AdaptiveSelector));
        r.register_selector("manual", |p| Box::new(ManualSelector { k: p.k }));
        r.register_selector("keep-all", |_| Box::new(KeepAllSelector));
        r.register_policy("degradation", |p| Box::new(DegradationPolicy { m: p.m }));
        r.register_policy("retain-all", |_| Box::new(RetainAllPolicy));
        r
    }

    pub fn register_selector<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&StrategyParams) -> Box<dyn TokenSelector> + Send + Sync + 'static,
    {
        self.selectors.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_policy<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&StrategyParams) -> Box<dyn EvictionPolicy> + Send + Sync + 'static,
    {
        self.policies.insert(name.to_string(), Box::new(factory));
    }

    pub fn selector(
        &self,
        name: &str,
        params: &StrategyParams,
    ) -> Result<Box<dyn TokenSelector>, UnknownStrategy> {
        self.selectors
            .get(name)
            .map(|f| f(params))
            .ok_or_else(|| UnknownStrategy {
                kind: "selector",
                name: name.to_string(),
                known: self.selector_names(),
            })
    }

    pub fn policy(
        &self,
        name: &str,
        params: &StrategyParams,
    ) -> Result<Box<dyn EvictionPolicy>, UnknownStrategy> {
        self.policies
            .get(name)
            .map(|f| f(params))
            .ok_or_else(|| UnknownStrategy {
                kind: "eviction policy",
                name: name.to_string(),
                known: self.policy_names(),
            })
    }

    pub fn selector_names(&self) -> Vec<String> {
        self.selectors.keys().cloned().collect()
    }

    pub fn policy_names(&self) -> Vec<String> {
        self.policies.keys().cloned().collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
