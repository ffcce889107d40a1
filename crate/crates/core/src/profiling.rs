//! Tensor-memory accounting and monotonic run timing.
//!
//! Memory is measured as bytes held by live tensors, split into four
//! categories. It is a machine-independent proxy for accelerator memory: it
//! ignores allocator and framework overhead but preserves every ordering
//! between configurations.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Parameters,
    Gradients,
    OptimizerState,
    Activations,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Parameters,
        Category::Gradients,
        Category::OptimizerState,
        Category::Activations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Parameters => "parameters",
            Category::Gradients => "gradients",
            Category::OptimizerState => "optimizer_state",
            Category::Activations => "activations",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bytes per category, in [`Category::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub parameters: u64,
    pub gradients: u64,
    pub optimizer_state: u64,
    pub activations: u64,
}

impl Breakdown {
    fn from_slots(s: &[u64; 4]) -> Self {
        Self {
            parameters: s[0],
            gradients: s[1],
            optimizer_state: s[2],
            activations: s[3],
        }
    }

    pub fn total(&self) -> u64 {
        self.parameters + self.gradients + self.optimizer_state + self.activations
    }
}

/// Running byte counts with a high-water mark.
///
/// Allocations may optionally carry an owner tag (`"encoder"`, `"head"`) so a
/// category can be broken down further, e.g. to show that a frozen encoder
/// holds no gradient or optimizer bytes.
#[derive(Clone, Debug, Default)]
pub struct MemoryLedger {
    current: [u64; 4],
    peak: u64,
    peak_breakdown: [u64; 4],
    owned: BTreeMap<(Category, String), u64>,
    owned_peak: BTreeMap<(Category, String), u64>,
}

pub type SharedLedger = Rc<RefCell<MemoryLedger>>;

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedLedger {
        Rc::new(RefCell::new(Self::new()))
    }

    pub fn record_alloc(&mut self, category: Category, bytes: u64) {
        self.current[category.slot()] += bytes;
        let total = self.current();
        if total > self.peak {
            self.peak = total;
            self.peak_breakdown = self.current;
        }
    }

    pub fn record_free(&mut self, category: Category, bytes: u64) -> Result<()> {
        let held = self.current[category.slot()];
        if bytes > held {
            return Err(Error::OverFree {
                category: category.name(),
                requested: bytes,
                held,
            });
        }
        self.current[category.slot()] = held - bytes;
        Ok(())
    }

    pub fn record_alloc_for(&mut self, category: Category, owner: &str, bytes: u64) {
        let key = (category, owner.to_string());
        let slot = self.owned.entry(key.clone()).or_default();
        *slot += bytes;
        let now = *slot;
        let peak = self.owned_peak.entry(key).or_default();
        *peak = (*peak).max(now);
        self.record_alloc(category, bytes);
    }

    pub fn record_free_for(&mut self, category: Category, owner: &str, bytes: u64) -> Result<()> {
        let held = self.owned.get(&(category, owner.to_string())).copied().unwrap_or(0);
        if bytes > held {
            return Err(Error::OverFree {
                category: category.name(),
                requested: bytes,
                held,
            });
        }
        self.record_free(category, bytes)?;
        self.owned.insert((category, owner.to_string()), held - bytes);
        Ok(())
    }

    pub fn current(&self) -> u64 {
        self.current.iter().sum()
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn category(&self, category: Category) -> u64 {
        self.current[category.slot()]
    }

    pub fn breakdown(&self) -> Breakdown {
        Breakdown::from_slots(&self.current)
    }

    /// Category sizes at the moment the peak was reached.
    pub fn peak_breakdown(&self) -> Breakdown {
        Breakdown::from_slots(&self.peak_breakdown)
    }

    pub fn owned(&self, category: Category, owner: &str) -> u64 {
        self.owned.get(&(category, owner.to_string())).copied().unwrap_or(0)
    }

    /// Highest byte count ever held by `owner` in `category`.
    pub fn owned_peak(&self, category: Category, owner: &str) -> u64 {
        self.owned_peak
            .get(&(category, owner.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

/// Per-epoch and total wall time of one run, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTrace {
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

impl TimingTrace {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }
}

// Instant can report zero for very short spans on coarse clocks.
const MIN_SPAN: f64 = 1e-9;

/// Monotonic stopwatch for a run; the total includes everything between
/// [`RunClock::start`] and [`RunClock::finish`], setup included.
#[derive(Debug)]
pub struct RunClock {
    started: Instant,
    epoch_started: Option<Instant>,
    epochs: Vec<f64>,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            epoch_started: None,
            epochs: Vec::new(),
        }
    }

    pub fn begin_epoch(&mut self) {
        self.epoch_started = Some(Instant::now());
    }

    pub fn end_epoch(&mut self) -> f64 {
        let began = self.epoch_started.take().unwrap_or(self.started);
        let secs = began.elapsed().as_secs_f64().max(MIN_SPAN);
        self.epochs.push(secs);
        secs
    }

    pub fn finish(self) -> TimingTrace {
        let measured = self.started.elapsed().as_secs_f64();
        let floor: f64 = self.epochs.iter().sum();
        TimingTrace {
            total_seconds: measured.max(floor).max(MIN_SPAN),
            epoch_seconds: self.epochs,
        }
    }
}

/// Divides every entry by the baseline entry.
pub fn relative_times(epoch_times: &BTreeMap<String, f64>, baseline: &str) -> Result<BTreeMap<String, f64>> {
    let base = *epoch_times
        .get(baseline)
        .ok_or_else(|| Error::MissingBaseline(baseline.to_string()))?;
    if base.is_nan() || base <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "baseline {baseline:?} has non-positive time {base}"
        )));
    }
    Ok(epoch_times.iter().map(|(k, v)| (k.clone(), v / base)).collect())
}
