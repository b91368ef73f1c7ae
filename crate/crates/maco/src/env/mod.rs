//! The three benchmark environments: heterogeneous capacitated routing,
//! open pickup-and-delivery, and flexible flow shop scheduling.

pub mod ffsp;
pub mod hcvrp;
pub mod omdcpdp;

pub use ffsp::{Ffsp, FfspInstance};
pub use hcvrp::{Hcvrp, HcvrpInstance};
pub use omdcpdp::{Omdcpdp, OmdcpdpInstance};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Hcvrp,
    Omdcpdp,
    Ffsp,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Hcvrp, EnvKind::Omdcpdp, EnvKind::Ffsp];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Hcvrp => "hcvrp",
            EnvKind::Omdcpdp => "omdcpdp",
            EnvKind::Ffsp => "ffsp",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hcvrp" => Ok(EnvKind::Hcvrp),
            "omdcpdp" => Ok(EnvKind::Omdcpdp),
            "ffsp" => Ok(EnvKind::Ffsp),
            other => Err(format!(
                "unknown environment {other:?}; valid names: hcvrp, omdcpdp, ffsp"
            )),
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}
