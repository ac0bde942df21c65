//! Metabolite identifiers and a fixed-size per-metabolite container.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five phosphorus-31 resonances tracked through the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metabolite {
    #[serde(rename = "PCr")]
    PCr,
    #[serde(rename = "Pi")]
    Pi,
    #[serde(rename = "gATP")]
    GammaAtp,
    #[serde(rename = "aATP")]
    AlphaAtp,
    #[serde(rename = "bATP")]
    BetaAtp,
}

impl Metabolite {
    pub const ALL: [Metabolite; 5] = [
        Metabolite::PCr,
        Metabolite::Pi,
        Metabolite::GammaAtp,
        Metabolite::AlphaAtp,
        Metabolite::BetaAtp,
    ];

    pub fn index(self) -> usize {
        match self {
            Metabolite::PCr => 0,
            Metabolite::Pi => 1,
            Metabolite::GammaAtp => 2,
            Metabolite::AlphaAtp => 3,
            Metabolite::BetaAtp => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metabolite::PCr => "PCr",
            Metabolite::Pi => "Pi",
            Metabolite::GammaAtp => "gATP",
            Metabolite::AlphaAtp => "aATP",
            Metabolite::BetaAtp => "bATP",
        }
    }
}

impl fmt::Display for Metabolite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metabolite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metabolite::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown metabolite `{s}`"))
    }
}

/// One value per metabolite. Serializes as a map keyed by metabolite label.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerMetabolite<T> {
    #[serde(rename = "PCr")]
    pub pcr: T,
    #[serde(rename = "Pi")]
    pub pi: T,
    #[serde(rename = "gATP")]
    pub gatp: T,
    #[serde(rename = "aATP")]
    pub aatp: T,
    #[serde(rename = "bATP")]
    pub batp: T,
}

impl<T> PerMetabolite<T> {
    pub fn from_fn(mut f: impl FnMut(Metabolite) -> T) -> Self {
        PerMetabolite {
            pcr: f(Metabolite::PCr),
            pi: f(Metabolite::Pi),
            gatp: f(Metabolite::GammaAtp),
            aatp: f(Metabolite::AlphaAtp),
            batp: f(Metabolite::BetaAtp),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Metabolite, &T) -> U) -> PerMetabolite<U> {
        PerMetabolite::from_fn(|m| f(m, &self[m]))
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(Metabolite, &T) -> Result<U, E>,
    ) -> Result<PerMetabolite<U>, E> {
        Ok(PerMetabolite {
            pcr: f(Metabolite::PCr, &self.pcr)?,
            pi: f(Metabolite::Pi, &self.pi)?,
            gatp: f(Metabolite::GammaAtp, &self.gatp)?,
            aatp: f(Metabolite::AlphaAtp, &self.aatp)?,
            batp: f(Metabolite::BetaAtp, &self.batp)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (Metabolite, &T)> {
        Metabolite::ALL.into_iter().map(move |m| (m, &self[m]))
    }
}

impl<T: Clone> PerMetabolite<T> {
    pub fn splat(value: T) -> Self {
        PerMetabolite::from_fn(|_| value.clone())
    }
}

impl<T> Index<Metabolite> for PerMetabolite<T> {
    type Output = T;

    fn index(&self, m: Metabolite) -> &T {
        match m {
            Metabolite::PCr => &self.pcr,
            Metabolite::Pi => &self.pi,
            Metabolite::GammaAtp => &self.gatp,
            Metabolite::AlphaAtp => &self.aatp,
            Metabolite::BetaAtp => &self.batp,
        }
    }
}

impl<T> IndexMut<Metabolite> for PerMetabolite<T> {
    fn index_mut(&mut self, m: Metabolite) -> &mut T {
        match m {
            Metabolite::PCr => &mut self.pcr,
            Metabolite::Pi => &mut self.pi,
            Metabolite::GammaAtp => &mut self.gatp,
            Metabolite::AlphaAtp => &mut self.aatp,
            Metabolite::BetaAtp => &mut self.batp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for m in Metabolite::ALL {
            assert_eq!(m.label().parse::<Metabolite>().unwrap(), m);
            assert_eq!(Metabolite::ALL[m.index()], m);
        }
        assert!("ADP".parse::<Metabolite>().is_err());
    }

    #[test]
    fn serializes_as_labelled_map() {
        let v = PerMetabolite::from_fn(|m| m.index() as f64);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"PCr":0.0,"Pi":1.0,"gATP":2.0,"aATP":3.0,"bATP":4.0}"#);
        let back: PerMetabolite<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
