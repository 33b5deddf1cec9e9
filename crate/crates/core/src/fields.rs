//! Plain-text field files.
//!
//! ```text
//! # field <name> dims=<nx> <nz> k=<k>
//! <x> <z> <value>
//! ```
//! with one row per degree of freedom and 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::FlowlineMesh;

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn format_field(name: &str, mesh: &FlowlineMesh, points: &[[f64; 2]], values: &[f64]) -> String {
    assert_eq!(points.len(), values.len(), "one value per point");
    let mut s = format!("# field {name} dims={} {} k={}\n", mesh.nx, mesh.nz, mesh.k);
    for (p, v) in points.iter().zip(values) {
        let _ = writeln!(s, "{} {} {}", fmt17(p[0]), fmt17(p[1]), fmt17(*v));
    }
    s
}

pub fn write_field(path: &Path, name: &str, mesh: &FlowlineMesh, points: &[[f64; 2]], values: &[f64]) -> Result<()> {
    std::fs::write(path, format_field(name, mesh, points, values))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub name: String,
    pub dims: (usize, usize),
    pub k: usize,
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
}

pub fn parse_field(text: &str, origin: &str) -> Result<FieldFile> {
    let err = |msg: String| Error::Parse {
        file: origin.to_string(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "#" || toks[1] != "field" || !toks[3].starts_with("dims=") || !toks[5].starts_with("k=") {
        return Err(err(format!("bad header `{header}`")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| err(format!("bad header number `{s}`: {e}")));
    let dims = (num(&toks[3][5..])?, num(toks[4])?);
    let k = num(&toks[5][2..])?;
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("line {}: {e}", i + 2)))?;
        if v.len() != 3 {
            return Err(err(format!("line {}: expected 3 columns", i + 2)));
        }
        points.push([v[0], v[1]]);
        values.push(v[2]);
    }
    Ok(FieldFile {
        name: toks[2].to_string(),
        dims,
        k,
        points,
        values,
    })
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let text = std::fs::read_to_string(path)?;
    parse_field(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::DomainSpec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn field_text_round_trips(values in proptest::collection::vec(-1e12f64..1e12, 9)) {
            let mesh = FlowlineMesh::new(DomainSpec::desk_default(), 8, 2, 2).unwrap();
            let pts = mesh.basal_coords();
            let text = format_field("beta", &mesh, &pts, &values);
            let f = parse_field(&text, "mem").unwrap();
            prop_assert_eq!(f.name.as_str(), "beta");
            prop_assert_eq!(f.dims, (8, 2));
            prop_assert_eq!(f.k, 2);
            prop_assert_eq!(f.values, values);
            prop_assert_eq!(f.points, pts);
        }
    }

    #[test]
    fn header_is_validated() {
        assert!(parse_field("# nope\n", "x").is_err());
        assert!(parse_field("# field a dims=1 2 k=2\n1 2\n", "x").is_err());
    }
}
