//! Fault injection for the gradient checker's negative control.
//!
//! When a site is armed on the current thread, the backward rule of that
//! operation scales its input gradients by [`FAULT_FACTOR`]. Forward values are
//! untouched, so only a gradient check can notice.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use super::Float;

pub const FAULT_FACTOR: Float = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultSite {
    MatMul,
    Elementwise,
    Concat,
    Softmax,
    Gelu,
    LayerNorm,
    Embedding,
    Bilinear,
    Conv2d,
    Lstm,
    CrossEntropy,
}

impl FaultSite {
    pub const ALL: [FaultSite; 11] = [
        FaultSite::MatMul,
        FaultSite::Elementwise,
        FaultSite::Concat,
        FaultSite::Softmax,
        FaultSite::Gelu,
        FaultSite::LayerNorm,
        FaultSite::Embedding,
        FaultSite::Bilinear,
        FaultSite::Conv2d,
        FaultSite::Lstm,
        FaultSite::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultSite::MatMul => "matmul",
            FaultSite::Elementwise => "elementwise",
            FaultSite::Concat => "concat",
            FaultSite::Softmax => "softmax",
            FaultSite::Gelu => "gelu",
            FaultSite::LayerNorm => "layer_norm",
            FaultSite::Embedding => "embedding",
            FaultSite::Bilinear => "bilinear",
            FaultSite::Conv2d => "conv2d",
            FaultSite::Lstm => "lstm",
            FaultSite::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for FaultSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultSite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultSite::ALL
            .iter()
            .copied()
            .find(|site| site.name() == s)
            .ok_or_else(|| format!("unknown fault site '{s}'"))
    }
}

thread_local! {
    static ARMED: Cell<Option<FaultSite>> = const { Cell::new(None) };
}

pub fn arm(site: Option<FaultSite>) {
    ARMED.with(|a| a.set(site));
}

pub fn armed() -> Option<FaultSite> {
    ARMED.with(|a| a.get())
}

/// Runs `f` with `site` armed, disarming afterwards even on early return.
pub fn with_fault<T>(site: FaultSite, f: impl FnOnce() -> T) -> T {
    struct Disarm(Option<FaultSite>);
    impl Drop for Disarm {
        fn drop(&mut self) {
            arm(self.0);
        }
    }
    let _guard = Disarm(armed());
    arm(Some(site));
    f()
}

#[inline]
pub(crate) fn factor(site: FaultSite) -> Float {
    if armed() == Some(site) {
        FAULT_FACTOR
    } else {
        1.0
    }
}
