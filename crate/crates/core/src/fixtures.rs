//! Checked-in oracle targets with provenance records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{self, OracleValue, Provenance, SearchRecord};

const BUILTIN: &str = include_str!("../fixtures/oracles.toml");

/// Quadrature nodes used for the risk-neutral price fixture.
const BS_NODES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    pub entries: BTreeMap<String, OracleValue>,
}

impl Fixtures {
    pub fn builtin() -> Result<Self> {
        Self::from_toml(BUILTIN)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("fixtures: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("fixtures: {e}")))
    }

    pub fn get(&self, id: &str) -> Result<&OracleValue> {
        self.entries.get(id).ok_or_else(|| Error::UnknownId(id.into()))
    }
}

/// Risk-neutral price of the at-the-money call by quadrature over the log-normal law.
pub fn bs_price_fixture() -> Result<OracleValue> {
    let price = oracles::black_scholes_by_integration(0.0, 1.0, 1.0, 1.0, 0.01, 0.0, 0.3, BS_NODES)?;
    Ok(OracleValue {
        value: vec![price],
        provenance: Provenance::NumericBruteforce,
        tolerance: 1e-8,
        reference: "black-scholes price J(0, 1), K = T = 1, r = 0.01, q = 0, sigma = 0.3".into(),
        search: Some(SearchRecord { bounds: vec![(-12.0, 12.0)], grid_n: BS_NODES, refinements: 0, evaluations: BS_NODES + 1 }),
    })
}

/// Recomputes every fixture from its oracle.
pub fn regen_fixtures() -> Result<Fixtures> {
    let mut entries = BTreeMap::new();
    for id in oracles::EXAMPLE_IDS {
        let v = oracles::analytic_minimizer(id).map_err(|e| Error::Config(format!("fixture {id}: {e}")))?;
        entries.insert((*id).to_string(), v);
    }
    entries.insert("bs_price_t0".into(), bs_price_fixture()?);
    Ok(Fixtures { entries })
}
