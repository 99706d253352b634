//! Minimal linear stand-ins for the case-study resources. Each builder
//! produces a leaf whose service variables are the hourly energy
//! (injection-positive), regulation capacity and reserve capacity it offers;
//! internal behaviour lives in auxiliary variables and private constraints.
//!
//! Regulation is capacity-only. Reserve must be deliverable for one hour from
//! stored energy where the resource has a state of charge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AuxVar, LinearConstraint, LocalVar, MarketNode, ResourceSpec, Sense, ServiceId, ServiceKind,
    ServiceSet, Term,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageParams {
    pub power_mw: f64,
    pub energy_mwh: f64,
    /// Charging efficiency.
    pub efficiency: f64,
    pub initial_soc_mwh: f64,
    /// $/MWh on discharge.
    pub marginal_cost: f64,
    #[serde(default)]
    pub regulation_cost: f64,
    #[serde(default)]
    pub reserve_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvFleetParams {
    pub count: u32,
    pub charger_kw: f64,
    pub bidirectional: bool,
    /// Connected fraction per hour; a single value applies to every hour.
    pub availability: Vec<f64>,
    /// $/MWh on discharge (battery wear).
    pub marginal_cost: f64,
    #[serde(default)]
    pub regulation_cost: f64,
    #[serde(default)]
    pub reserve_cost: f64,
    /// Share of connected power that may be offered as reserve.
    #[serde(default = "one")]
    pub reserve_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TclParams {
    pub rated_mw: f64,
    /// Flexible share of rated power per hour; a single value applies to
    /// every hour.
    pub flexible_fraction: Vec<f64>,
    /// $/MWh on upward shifts.
    pub marginal_cost: f64,
    #[serde(default)]
    pub regulation_cost: f64,
    #[serde(default)]
    pub reserve_cost: f64,
    /// Offer energy shifting subject to daily energy neutrality.
    #[serde(default)]
    pub energy_shifting: bool,
}

fn one() -> f64 {
    1.0
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParams(msg()))
    }
}

fn finite_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn per_hour(values: &[f64], horizon: u32, what: &str) -> Result<Vec<f64>> {
    check(
        values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
        || format!("{what} must lie in [0, 1]"),
    )?;
    match values.len() {
        1 => Ok(vec![values[0]; horizon as usize]),
        n if n == horizon as usize => Ok(values.to_vec()),
        n => Err(Error::InvalidParams(format!(
            "{what} has {n} entries for a horizon of {horizon}"
        ))),
    }
}

/// Per-hour service ids for the kinds present in the scenario.
struct Hour {
    energy: Option<ServiceId>,
    regulation: Option<ServiceId>,
    reserve: Option<ServiceId>,
}

fn hours(services: &ServiceSet) -> Vec<Hour> {
    (0..services.horizon())
        .map(|h| Hour {
            energy: services.find(ServiceKind::Energy, h),
            regulation: services.find(ServiceKind::Regulation, h),
            reserve: services.find(ServiceKind::Reserve, h),
        })
        .collect()
}

fn offer(spec: &mut ResourceSpec, s: ServiceId, cost: f64, floor: f64, cap: f64) {
    spec.costs.insert(s, cost);
    spec.capacities.insert(s, cap);
    if floor != 0.0 {
        spec.floors.insert(s, floor);
    }
}

fn aux(spec: &mut ResourceSpec, name: String, cost: f64, hi: f64) {
    spec.aux.push(AuxVar {
        name,
        lo: 0.0,
        hi,
        cost,
    });
}

fn svc(s: ServiceId, coef: f64) -> Term {
    Term::own(LocalVar::Service(s), coef)
}

fn var(name: &str, coef: f64) -> Term {
    Term::own(LocalVar::Aux(name.to_string()), coef)
}

/// Energy `e = dis − ch` and the shared power limit
/// `dis + ch + reg + res ≤ power`, which scales with reported capacity.
fn power_block(
    spec: &mut ResourceSpec,
    hour: &Hour,
    h: usize,
    power: f64,
    dis: &str,
    ch: &str,
) {
    let mut shared = vec![var(dis, 1.0), var(ch, 1.0)];
    if let Some(e) = hour.energy {
        spec.private_constraints.push(LinearConstraint::new(
            format!("energy_split@{h}"),
            vec![svc(e, 1.0), var(dis, -1.0), var(ch, 1.0)],
            Sense::Eq,
            0.0,
        ));
    }
    shared.extend(hour.regulation.map(|s| svc(s, 1.0)));
    shared.extend(hour.reserve.map(|s| svc(s, 1.0)));
    spec.private_constraints.push(
        LinearConstraint::new(format!("power@{h}"), shared, Sense::Le, power).capacity_linked(),
    );
}

/// Battery with hourly state of charge `soc@h`:
/// `soc@h = soc@h−1 + η·ch@h − dis@h`, `0 ≤ soc ≤ energy`, reserve plus
/// discharge covered by the energy stored at the start of the hour, and the
/// day ends no emptier than it started.
pub fn build_storage_node(
    name: &str,
    p: &StorageParams,
    services: &ServiceSet,
) -> Result<MarketNode> {
    check(p.power_mw.is_finite() && p.power_mw > 0.0, || "storage power must be positive".into())?;
    check(p.energy_mwh.is_finite() && p.energy_mwh > 0.0, || {
        "storage energy must be positive".into()
    })?;
    check(p.efficiency > 0.0 && p.efficiency <= 1.0, || "efficiency must lie in (0, 1]".into())?;
    check(
        finite_nonneg(p.initial_soc_mwh) && p.initial_soc_mwh <= p.energy_mwh,
        || "initial state of charge must lie in [0, energy]".into(),
    )?;
    check(
        [p.marginal_cost, p.regulation_cost, p.reserve_cost].iter().all(|c| c.is_finite()),
        || "costs must be finite".into(),
    )?;

    let mut spec = ResourceSpec::default();
    let pw = p.power_mw;
    for (h, hour) in hours(services).iter().enumerate() {
        let (dis, ch, soc) = (format!("dis@{h}"), format!("ch@{h}"), format!("soc@{h}"));
        if let Some(s) = hour.energy {
            offer(&mut spec, s, 0.0, -pw, pw);
        }
        if let Some(s) = hour.regulation {
            offer(&mut spec, s, p.regulation_cost, 0.0, pw);
        }
        if let Some(s) = hour.reserve {
            offer(&mut spec, s, p.reserve_cost, 0.0, pw);
        }
        aux(&mut spec, dis.clone(), p.marginal_cost, f64::INFINITY);
        aux(&mut spec, ch.clone(), 0.0, f64::INFINITY);
        aux(&mut spec, soc.clone(), 0.0, p.energy_mwh);
        power_block(&mut spec, hour, h, pw, &dis, &ch);

        let prev = (h > 0).then(|| format!("soc@{}", h - 1));
        let mut terms = vec![var(&soc, 1.0), var(&ch, -p.efficiency), var(&dis, 1.0)];
        let mut rhs = 0.0;
        match &prev {
            Some(prev) => terms.push(var(prev, -1.0)),
            None => rhs = p.initial_soc_mwh,
        }
        spec.private_constraints
            .push(LinearConstraint::new(format!("soc@{h}"), terms, Sense::Eq, rhs));

        let mut deliver = vec![var(&dis, 1.0)];
        deliver.extend(hour.reserve.map(|s| svc(s, 1.0)));
        let rhs = match &prev {
            Some(prev) => {
                deliver.push(var(prev, -1.0));
                0.0
            }
            None => p.initial_soc_mwh,
        };
        spec.private_constraints.push(LinearConstraint::new(
            format!("reserve_energy@{h}"),
            deliver,
            Sense::Le,
            rhs,
        ));
    }
    if services.horizon() > 0 {
        let last = format!("soc@{}", services.horizon() - 1);
        spec.private_constraints.push(LinearConstraint::new(
            "terminal_soc",
            vec![var(&last, 1.0)],
            Sense::Ge,
            p.initial_soc_mwh,
        ));
    }
    Ok(MarketNode::leaf(name, spec))
}

/// Hourly connected power of the fleet in MW.
pub fn ev_fleet_power(p: &EvFleetParams, horizon: u32) -> Result<Vec<f64>> {
    let avail = per_hour(&p.availability, horizon, "availability")?;
    Ok(avail
        .iter()
        .map(|a| f64::from(p.count) * p.charger_kw * a / 1000.0)
        .collect())
}

/// Fleet of identical chargers. Bidirectional fleets may inject as much as
/// they can draw; unidirectional ones only reduce their charging, so their
/// energy offer is non-negative.
pub fn build_ev_fleet_node(
    name: &str,
    p: &EvFleetParams,
    services: &ServiceSet,
) -> Result<MarketNode> {
    check(p.count >= 1, || "fleet needs at least one vehicle".into())?;
    check(p.charger_kw.is_finite() && p.charger_kw > 0.0, || {
        "charger power must be positive".into()
    })?;
    check((0.0..=1.0).contains(&p.reserve_fraction), || {
        "reserve fraction must lie in [0, 1]".into()
    })?;
    check(
        [p.marginal_cost, p.regulation_cost, p.reserve_cost].iter().all(|c| c.is_finite()),
        || "costs must be finite".into(),
    )?;
    let power = ev_fleet_power(p, services.horizon())?;

    let mut spec = ResourceSpec::default();
    for (h, hour) in hours(services).iter().enumerate() {
        let pw = power[h];
        let (dis, ch) = (format!("dis@{h}"), format!("ch@{h}"));
        if let Some(s) = hour.energy {
            let floor = if p.bidirectional { -pw } else { 0.0 };
            offer(&mut spec, s, 0.0, floor, pw);
        }
        if let Some(s) = hour.regulation {
            offer(&mut spec, s, p.regulation_cost, 0.0, pw);
        }
        if let Some(s) = hour.reserve {
            offer(&mut spec, s, p.reserve_cost, 0.0, p.reserve_fraction * pw);
        }
        aux(&mut spec, dis.clone(), p.marginal_cost, f64::INFINITY);
        aux(&mut spec, ch.clone(), 0.0, if p.bidirectional { f64::INFINITY } else { 0.0 });
        power_block(&mut spec, hour, h, pw, &dis, &ch);
    }
    Ok(MarketNode::leaf(name, spec))
}

/// Thermostatic load offering regulation and reserve up to its flexible
/// power each hour, and optionally shifting consumption with
/// `Σ_h e_h = 0`.
pub fn build_tcl_node(name: &str, p: &TclParams, services: &ServiceSet) -> Result<MarketNode> {
    check(p.rated_mw.is_finite() && p.rated_mw > 0.0, || "rated power must be positive".into())?;
    check(
        [p.marginal_cost, p.regulation_cost, p.reserve_cost].iter().all(|c| c.is_finite()),
        || "costs must be finite".into(),
    )?;
    let frac = per_hour(&p.flexible_fraction, services.horizon(), "flexible fraction")?;

    let mut spec = ResourceSpec::default();
    let mut neutral = Vec::new();
    for (h, hour) in hours(services).iter().enumerate() {
        let flex = p.rated_mw * frac[h];
        if let Some(s) = hour.regulation {
            offer(&mut spec, s, p.regulation_cost, 0.0, flex);
        }
        if let Some(s) = hour.reserve {
            offer(&mut spec, s, p.reserve_cost, 0.0, flex);
        }
        match hour.energy {
            Some(e) if p.energy_shifting => {
                let (up, dn) = (format!("up@{h}"), format!("dn@{h}"));
                offer(&mut spec, e, 0.0, -flex, flex);
                aux(&mut spec, up.clone(), p.marginal_cost, f64::INFINITY);
                aux(&mut spec, dn.clone(), 0.0, f64::INFINITY);
                power_block(&mut spec, hour, h, flex, &up, &dn);
                neutral.push(svc(e, 1.0));
            }
            _ => {
                let mut shared = Vec::new();
                shared.extend(hour.regulation.map(|s| svc(s, 1.0)));
                shared.extend(hour.reserve.map(|s| svc(s, 1.0)));
                if shared.len() > 1 {
                    spec.private_constraints.push(
                        LinearConstraint::new(format!("power@{h}"), shared, Sense::Le, flex)
                            .capacity_linked(),
                    );
                }
            }
        }
    }
    if !neutral.is_empty() {
        spec.private_constraints
            .push(LinearConstraint::new("energy_neutral", neutral, Sense::Eq, 0.0));
    }
    Ok(MarketNode::leaf(name, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::flatten_services;

    fn services(h: u32) -> ServiceSet {
        flatten_services(
            &[ServiceKind::Energy, ServiceKind::Regulation, ServiceKind::Reserve],
            h,
        )
        .unwrap()
    }

    pub(crate) fn storage() -> StorageParams {
        StorageParams {
            power_mw: 0.5,
            energy_mwh: 1.0,
            efficiency: 0.9,
            initial_soc_mwh: 0.5,
            marginal_cost: 2.0,
            regulation_cost: 0.0,
            reserve_cost: 0.0,
        }
    }

    #[test]
    fn storage_shape() {
        let node = build_storage_node("ES", &storage(), &services(24)).unwrap();
        let r = node.resource().unwrap();
        assert_eq!(r.capacities.len(), 72);
        let soc_rows = r
            .private_constraints
            .iter()
            .filter(|c| c.label.starts_with("soc@") && c.sense == Sense::Eq)
            .count();
        assert_eq!(soc_rows, 24);
        assert!(r.aux.iter().filter(|a| a.name.starts_with("soc@")).all(|a| a.hi == 1.0));
    }

    #[test]
    fn invalid_storage_is_rejected() {
        let mut p = storage();
        p.initial_soc_mwh = 2.0;
        assert!(matches!(
            build_storage_node("ES", &p, &services(1)),
            Err(Error::InvalidParams(_))
        ));
        p = storage();
        p.efficiency = 0.0;
        assert!(build_storage_node("ES", &p, &services(1)).is_err());
    }

    fn ev(count: u32, bidirectional: bool) -> EvFleetParams {
        EvFleetParams {
            count,
            charger_kw: 7.68,
            bidirectional,
            availability: vec![1.0],
            marginal_cost: 50.0,
            regulation_cost: 12.0,
            reserve_cost: 2.0,
            reserve_fraction: 0.5,
        }
    }

    #[test]
    fn fleet_power_bounds() {
        let s = services(2);
        let node = build_ev_fleet_node("EV", &ev(30, true), &s).unwrap();
        let r = node.resource().unwrap();
        let e0 = s.find(ServiceKind::Energy, 0).unwrap();
        let reg0 = s.find(ServiceKind::Regulation, 0).unwrap();
        assert!((r.cap(e0) - 0.2304).abs() < 1e-15);
        assert_eq!(r.floor(e0), -r.cap(e0));
        assert_eq!(r.cap(reg0), r.cap(e0));
        let uni = build_ev_fleet_node("EV", &ev(30, false), &s).unwrap();
        assert_eq!(uni.resource().unwrap().floor(e0), 0.0);
    }

    #[test]
    fn unavailable_hour_has_no_capacity() {
        let s = services(2);
        let mut p = ev(30, true);
        p.availability = vec![1.0, 0.0];
        let node = build_ev_fleet_node("EV", &p, &s).unwrap();
        let r = node.resource().unwrap();
        for kind in [ServiceKind::Energy, ServiceKind::Regulation, ServiceKind::Reserve] {
            assert_eq!(r.cap(s.find(kind, 1).unwrap()), 0.0);
        }
        p.availability = vec![1.0, 0.5, 0.5];
        assert!(build_ev_fleet_node("EV", &p, &s).is_err());
    }

    #[test]
    fn tcl_flexibility() {
        let s = services(3);
        let p = TclParams {
            rated_mw: 1.0,
            flexible_fraction: vec![0.3],
            marginal_cost: 1.0,
            regulation_cost: 0.0,
            reserve_cost: 0.0,
            energy_shifting: false,
        };
        let node = build_tcl_node("TCL", &p, &s).unwrap();
        let r = node.resource().unwrap();
        assert_eq!(r.cap(s.find(ServiceKind::Regulation, 2).unwrap()), 0.3);
        assert!(r.capacities.get(&s.find(ServiceKind::Energy, 0).unwrap()).is_none());
    }
}
