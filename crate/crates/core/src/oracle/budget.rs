use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::OracleError;

/// What a query was spent on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Harvest,
    Drift,
    Baseline,
    Selection,
    Projection,
    Final,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Harvest => "harvest",
            Phase::Drift => "drift",
            Phase::Baseline => "baseline",
            Phase::Selection => "selection",
            Phase::Projection => "projection",
            Phase::Final => "final",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Default)]
struct Ledger {
    used: u64,
    tallies: BTreeMap<Phase, u64>,
}

/// Client-side query allowance shared by everything that talks to one oracle.
///
/// Charging is atomic: concurrent callers can never push `used` past
/// `max_queries`, and `used` always equals the sum of the phase tallies.
#[derive(Debug)]
pub struct QueryBudget {
    max_queries: u64,
    ledger: Mutex<Ledger>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSnapshot {
    pub max_queries: u64,
    pub used: u64,
    pub tallies: BTreeMap<Phase, u64>,
}

impl QueryBudget {
    pub const DEFAULT_MAX: u64 = 4000;

    pub fn new(max_queries: u64) -> Self {
        Self {
            max_queries,
            ledger: Mutex::new(Ledger::default()),
        }
    }

    /// Consumes one query and returns its 1-based index.
    pub fn charge(&self, phase: Phase) -> Result<u64, OracleError> {
        let mut ledger = self.ledger.lock().expect("budget lock poisoned");
        if ledger.used >= self.max_queries {
            return Err(OracleError::BudgetExhausted {
                used: ledger.used,
                max: self.max_queries,
            });
        }
        ledger.used += 1;
        *ledger.tallies.entry(phase).or_insert(0) += 1;
        Ok(ledger.used)
    }

    pub fn max_queries(&self) -> u64 {
        self.max_queries
    }

    pub fn used(&self) -> u64 {
        self.ledger.lock().expect("budget lock poisoned").used
    }

    pub fn remaining(&self) -> u64 {
        self.max_queries - self.used()
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    pub fn tally(&self, phase: Phase) -> u64 {
        let ledger = self.ledger.lock().expect("budget lock poisoned");
        ledger.tallies.get(&phase).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BudgetSnapshot {
        let ledger = self.ledger.lock().expect("budget lock poisoned");
        BudgetSnapshot {
            max_queries: self.max_queries,
            used: ledger.used,
            tallies: ledger.tallies.clone(),
        }
    }
}

impl Default for QueryBudget {
    fn default() -> Self {
        Self::new(Self::DEFAULT_MAX)
    }
}
