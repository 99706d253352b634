use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ServiceId, ServiceKind, ServiceSet};

/// Header every price file must start with.
pub const PRICE_HEADER: [&str; 4] = ["hour", "energy", "regulation", "reserve"];

/// Synthetic day-ahead prices in the shape of a NYISO zonal series. Not
/// market data: the values were authored by hand for the case study.
pub const BUNDLED_SYNTHETIC_24H: &str = include_str!("../../data/nyiso_synthetic_24h.csv");

/// Hourly top-market prices: $/MWh for energy, $/MW-h for capacity services.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub energy: Vec<f64>,
    pub regulation: Vec<f64>,
    pub reserve: Vec<f64>,
}

impl PriceSeries {
    pub fn horizon(&self) -> u32 {
        self.energy.len() as u32
    }

    pub fn constant(horizon: u32, energy: f64, regulation: f64, reserve: f64) -> Self {
        let h = horizon as usize;
        PriceSeries {
            energy: vec![energy; h],
            regulation: vec![regulation; h],
            reserve: vec![reserve; h],
        }
    }

    pub fn get(&self, kind: ServiceKind, hour: u32) -> Option<f64> {
        let v = match kind {
            ServiceKind::Energy => &self.energy,
            ServiceKind::Regulation => &self.regulation,
            ServiceKind::Reserve => &self.reserve,
            ServiceKind::Other => return None,
        };
        v.get(hour as usize).copied()
    }

    /// Price per flattened service. Horizons must agree.
    pub fn top_prices(&self, services: &ServiceSet) -> Result<BTreeMap<ServiceId, f64>> {
        if services.horizon() != self.horizon() {
            return Err(Error::Config(format!(
                "price series covers {} hours but the scenario has {}",
                self.horizon(),
                services.horizon()
            )));
        }
        services
            .iter()
            .map(|s| {
                self.get(s.kind, s.hour)
                    .map(|p| (s.id, p))
                    .ok_or_else(|| Error::Config(format!("no price column for `{}`", s.label)))
            })
            .collect()
    }

    /// Serializes in the canonical CSV layout.
    pub fn to_csv(&self) -> String {
        let mut out = PRICE_HEADER.join(",");
        out.push('\n');
        for h in 0..self.energy.len() {
            out.push_str(&format!(
                "{h},{},{},{}\n",
                self.energy[h], self.regulation[h], self.reserve[h]
            ));
        }
        out
    }
}

pub fn load_prices_csv(path: &Path) -> Result<PriceSeries> {
    parse_prices_csv(&std::fs::read_to_string(path)?)
}

pub fn bundled_prices() -> PriceSeries {
    parse_prices_csv(BUNDLED_SYNTHETIC_24H).expect("bundled price fixture is well-formed")
}

/// Parses `hour,energy,regulation,reserve` rows. Rows may come in any order
/// but must cover hours `0..H` exactly once.
pub fn parse_prices_csv(text: &str) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let malformed = |line: u64, reason: String| Error::MalformedRow {
        line: line as usize,
        reason,
    };

    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))?
        .map_err(|e| malformed(1, e.to_string()))?;
    if header.iter().ne(PRICE_HEADER) {
        return Err(malformed(
            1,
            format!("expected header `{}`", PRICE_HEADER.join(",")),
        ));
    }

    let mut rows: BTreeMap<u32, [f64; 3]> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 4 {
            return Err(malformed(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let hour: u32 = rec[0]
            .parse()
            .map_err(|_| malformed(line, format!("hour `{}` is not a non-negative integer", &rec[0])))?;
        let mut vals = [0.0; 3];
        for (k, v) in vals.iter_mut().enumerate() {
            let field = &rec[k + 1];
            *v = field
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| malformed(line, format!("price `{field}` is not a finite number")))?;
        }
        if rows.insert(hour, vals).is_some() {
            return Err(Error::DuplicateHour(hour));
        }
    }
    if rows.is_empty() {
        return Err(malformed(2, "no data rows".into()));
    }
    let horizon = rows.len() as u32;
    if let Some(missing) = (0..horizon).find(|h| !rows.contains_key(h)) {
        return Err(Error::MissingHour(missing));
    }
    let mut series = PriceSeries {
        energy: Vec::with_capacity(rows.len()),
        regulation: Vec::with_capacity(rows.len()),
        reserve: Vec::with_capacity(rows.len()),
    };
    for [e, r, s] in rows.into_values() {
        series.energy.push(e);
        series.regulation.push(r);
        series.reserve.push(s);
    }
    Ok(series)
}
