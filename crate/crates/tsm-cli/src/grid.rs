//! Parsing of misreport factor grids.

use std::fmt;

/// A grid given on the command line was malformed or missed the truthful
/// factor.
#[derive(Debug)]
pub struct GridError(pub String);

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GridError {}

/// Parses `start:stop:step` or a comma-separated list of factors. The result
/// must contain 1.0.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, GridError> {
    let bad = |why: &str| GridError(format!("invalid grid `{spec}`: {why}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let factors = match parts.as_slice() {
        [start, stop, step] => {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if !(step > 0.0) || !(stop >= start) {
                return Err(bad("expected start <= stop and step > 0"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|k| ((start + k as f64 * step) * 1e10).round() / 1e10)
                .collect()
        }
        [list] => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("not a number")))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected start:stop:step or a comma-separated list")),
    };
    if factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(bad("factors must be positive"));
    }
    if !factors.iter().any(|f| (f - 1.0).abs() < 1e-12) {
        return Err(bad("the truthful factor 1.0 is missing"));
    }
    Ok(factors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_hits_exact_grid_points() {
        let g = parse_grid("0.5:1.5:0.05").unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[10], 1.0);
        assert_eq!(g[12], 1.1);
        assert_eq!(g, tsm_core::analysis::default_factors());
    }

    #[test]
    fn lists_and_errors() {
        assert_eq!(parse_grid("0.9, 1,1.1").unwrap(), vec![0.9, 1.0, 1.1]);
        assert!(parse_grid("0.9,1.1").is_err());
        assert!(parse_grid("0.5:1.5:0").is_err());
        assert!(parse_grid("1:0.5:0.1").is_err());
        assert!(parse_grid("a,1").is_err());
        assert!(parse_grid("-1,1").is_err());
        assert!(parse_grid("1:2").is_err());
    }
}
