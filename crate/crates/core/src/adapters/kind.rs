use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Fine-tuning method applied to one frozen linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Summation compression: `ΔW = b 1ᵀ`.
    OneLora,
    Lora,
    Dora,
    Vera,
    /// MoRA "sharing": grouped sums in, cyclic copies out.
    Mora1,
    /// MoRA with reshape compression and rotary mixing.
    Mora6,
    BitFit,
    DiffFit,
    /// Full fine-tuning of `W` and the bias.
    All,
    /// `ΔW = b aᵀ` with a fixed random `a`; the ablation partner of [`Method::OneLora`].
    RandomCompression,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::OneLora,
        Method::Lora,
        Method::Dora,
        Method::Vera,
        Method::Mora1,
        Method::Mora6,
        Method::BitFit,
        Method::DiffFit,
        Method::All,
        Method::RandomCompression,
    ];

    /// The nine methods of the comparison table (everything but the ablation).
    pub const TABLE: [Method; 9] = [
        Method::OneLora,
        Method::Lora,
        Method::Dora,
        Method::Vera,
        Method::Mora1,
        Method::Mora6,
        Method::BitFit,
        Method::DiffFit,
        Method::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OneLora => "ilora",
            Method::Lora => "lora",
            Method::Dora => "dora",
            Method::Vera => "vera",
            Method::Mora1 => "mora1",
            Method::Mora6 => "mora6",
            Method::BitFit => "bitfit",
            Method::DiffFit => "difffit",
            Method::All => "all",
            Method::RandomCompression => "ilora_rand",
        }
    }

    /// Whether `rank` is meaningful for this method.
    pub fn uses_rank(self) -> bool {
        matches!(self, Method::Lora | Method::Dora | Method::Vera)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .or(match key.as_str() {
                "1lora" => Some(Method::OneLora),
                "full" => Some(Method::All),
                _ => None,
            })
            .ok_or_else(|| Error::arg(format!("unknown method `{s}`")))
    }
}

/// How DoRA differentiates through its per-row normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormGradient {
    /// Exact gradient, including the dependence of the norm on `B` and `A`.
    #[default]
    Full,
    /// The norm is treated as a constant during backward.
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterKind {
    pub method: Method,
    /// `r` for LoRA, DoRA and VeRA; ignored otherwise.
    pub rank: usize,
    /// Multiplier on `BA` for LoRA and DoRA.
    pub scale: f64,
    pub dora_norm: NormGradient,
}

impl AdapterKind {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rank: 1,
            scale: 1.0,
            dora_norm: NormGradient::Full,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_dora_norm(mut self, mode: NormGradient) -> Self {
        self.dora_norm = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.uses_rank() && self.rank == 0 {
            return Err(Error::arg(format!("{} requires rank >= 1", self.method)));
        }
        if !self.scale.is_finite() {
            return Err(Error::arg("adapter scale must be finite"));
        }
        Ok(())
    }
}

impl From<Method> for AdapterKind {
    fn from(method: Method) -> Self {
        AdapterKind::new(method)
    }
}

/// Rounds to the nearest integer, ties to even.
pub(crate) fn round_half_even(x: f64) -> usize {
    x.round_ties_even() as usize
}

/// Square inner rank of MoRA: `round(√((k+d)·r))`, or `round(√d)` in the
/// very-low-rank setting.
pub fn mora_rank(k: usize, d: usize, r: usize, very_low: bool) -> usize {
    let raw = if very_low {
        (d as f64).sqrt()
    } else {
        (((k + d) * r) as f64).sqrt()
    };
    round_half_even(raw).max(1)
}

/// Trainable parameters the adapter adds to one `d × k` layer.
pub fn param_count(kind: &AdapterKind, k: usize, d: usize) -> usize {
    let r = kind.rank;
    match kind.method {
        Method::OneLora | Method::RandomCompression | Method::BitFit => d,
        Method::Lora => r * (k + d),
        Method::Dora => d + r * (k + d),
        Method::Vera => r + d,
        Method::Mora1 | Method::Mora6 => {
            let rh = mora_rank(k, d, 1, true);
            rh * rh
        }
        Method::DiffFit => 2 * d,
        Method::All => k * d + d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub mults: usize,
    pub adds: usize,
}

/// Extra forward work of the unmerged adapter on one input, not counting the
/// frozen `W₀x`. Divisions count as multiplies; the LoRA/DoRA scale is taken
/// as folded into `B`.
///
/// | method | mults | adds |
/// |---|---|---|
/// | ilora | `d` | `k-1+d` |
/// | ilora_rand | `k+d` | `k-1+d` |
/// | lora | `rk+dr` | `r(k-1)+d(r-1)+d` |
/// | dora | `dkr+dk+rk+dr+2d` | `dk(r-1)+dk+d(k-1)+r(k-1)+d(r-1)+d` |
/// | vera | `rk+r+dr+d` | `r(k-1)+d(r-1)+d` |
/// | mora1 | `r̂²` | `k-g+r̂(r̂-1)+d`, `g` non-empty groups |
/// | mora6 | `c(4⌊r̂/2⌋+r̂²)` | `c(2⌊r̂/2⌋+r̂(r̂-1))+d`, `c = ⌈k/r̂⌉` |
/// | bitfit | `0` | `d` |
/// | difffit | `d` | `d` |
/// | all | `dk` | `d(k-1)+2d` |
pub fn flop_count(kind: &AdapterKind, k: usize, d: usize) -> FlopCount {
    let r = kind.rank;
    let km1 = k.saturating_sub(1);
    let (mults, adds) = match kind.method {
        Method::OneLora => (d, km1 + d),
        Method::RandomCompression => (k + d, km1 + d),
        Method::Lora => (r * k + d * r, r * km1 + d * (r - 1) + d),
        Method::Dora => (
            d * k * r + d * k + r * k + d * r + 2 * d,
            d * k * (r - 1) + d * k + d * km1 + r * km1 + d * (r - 1) + d,
        ),
        Method::Vera => (r * k + r + d * r + d, r * km1 + d * (r - 1) + d),
        Method::Mora1 => {
            let rh = mora_rank(k, d, 1, true);
            let group = k.div_ceil(rh);
            let groups = k.div_ceil(group);
            (rh * rh, k - groups + rh * (rh - 1) + d)
        }
        Method::Mora6 => {
            let rh = mora_rank(k, d, 1, true);
            let cols = k.div_ceil(rh);
            let pairs = rh / 2;
            (cols * (4 * pairs + rh * rh), cols * (2 * pairs + rh * (rh - 1)) + d)
        }
        Method::BitFit => (0, d),
        Method::DiffFit => (d, d),
        Method::All => (d * k, d * km1 + 2 * d),
    };
    FlopCount { mults, adds }
}
