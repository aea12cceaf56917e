//! TSPLIB `EUC_2D` instances and `.tour` files.

use crate::error::{Error, Result};
use crate::instance::{validate_tour, Point, Tour, TspInstance};

/// Splits a `KEY : VALUE` header line. Spacing around the colon is free.
fn header(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once(':')?;
    Some((k.trim(), v.trim()))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::format(None, format!("{key}: `{v}` is not a count")))
}

pub fn parse_tsplib_bytes(bytes: &[u8]) -> Result<TspInstance> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(None, format!("not UTF-8: {e}")))?;
    parse_tsplib(text)
}

pub fn parse_tsplib(text: &str) -> Result<TspInstance> {
    let mut name = None;
    let mut dimension = None;
    let mut weight_type = None;
    let mut lines = text.lines().map(str::trim).enumerate();
    let mut coords = None;

    while let Some((_, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        if line.starts_with("NODE_COORD_SECTION") {
            coords = Some(read_coords(&mut lines, dimension)?);
            break;
        }
        if line == "EOF" {
            break;
        }
        let Some((key, value)) = header(line) else {
            return Err(Error::format(None, format!("unexpected line `{line}`")));
        };
        match key {
            "NAME" => name = Some(value.to_string()),
            "DIMENSION" => dimension = Some(parse_usize(key, value)?),
            "EDGE_WEIGHT_TYPE" => weight_type = Some(value.to_string()),
            _ => {}
        }
    }

    let dimension = dimension.ok_or_else(|| Error::format(None, "missing DIMENSION"))?;
    match weight_type.as_deref() {
        Some("EUC_2D") => {}
        Some(other) => return Err(Error::Unsupported(format!("EDGE_WEIGHT_TYPE {other}"))),
        None => return Err(Error::format(None, "missing EDGE_WEIGHT_TYPE")),
    }
    let coords = coords.ok_or_else(|| Error::format(None, "missing NODE_COORD_SECTION"))?;
    if coords.len() != dimension {
        return Err(Error::format(
            None,
            format!("DIMENSION is {dimension} but {} coordinates were given", coords.len()),
        ));
    }
    let instance = TspInstance::new(coords)?;
    Ok(match name {
        Some(n) => instance.with_name(n),
        None => instance,
    })
}

fn read_coords<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, dimension: Option<usize>) -> Result<Vec<Point>> {
    let mut coords = Vec::with_capacity(dimension.unwrap_or(0));
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        if line == "EOF" || line.ends_with("_SECTION") {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(Some(coords.len()), format!("line {}: malformed coordinate `{line}`", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let x: f64 = fields[1].parse().map_err(|_| bad())?;
        let y: f64 = fields[2].parse().map_err(|_| bad())?;
        coords.push(Point::new(x, y));
    }
    Ok(coords)
}

/// TSPLIB `nint`: round half up.
#[inline]
pub fn tsplib_round(d: f64) -> u64 {
    (d + 0.5).floor() as u64
}

/// Tour length with each edge rounded to the nearest integer, half up.
pub fn tsplib_rounded_length(instance: &TspInstance, tour: &Tour) -> Result<u64> {
    validate_tour(instance, tour).map_err(Error::TourInvalid)?;
    let n = tour.len();
    Ok((0..n).map(|i| tsplib_round(instance.cost(tour.order[i], tour.order[(i + 1) % n]))).sum())
}

/// Reads a TSPLIB `TOUR_SECTION` (1-based ids, terminated by `-1`).
pub fn parse_tsplib_tour(text: &str) -> Result<Tour> {
    let mut lines = text.lines().map(str::trim);
    if !lines.by_ref().any(|l| l.starts_with("TOUR_SECTION")) {
        return Err(Error::format(None, "missing TOUR_SECTION"));
    }
    let mut order = Vec::new();
    'outer: for line in lines {
        for tok in line.split_whitespace() {
            if tok == "-1" || tok == "EOF" {
                break 'outer;
            }
            let id: usize =
                tok.parse().map_err(|_| Error::format(Some(order.len()), format!("bad tour entry `{tok}`")))?;
            if id == 0 {
                return Err(Error::format(Some(order.len()), "tour ids are 1-based"));
            }
            order.push(id - 1);
        }
    }
    Ok(Tour::new(order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_half_up() {
        let two = |d: f64| TspInstance::new(vec![Point::new(0.0, 0.0), Point::new(d, 0.0)]).unwrap();
        assert_eq!(tsplib_rounded_length(&two(2.4), &Tour::identity(2)).unwrap(), 4);
        assert_eq!(tsplib_rounded_length(&two(2.5), &Tour::identity(2)).unwrap(), 6);
    }

    #[test]
    fn header_variants_and_crlf() {
        let text = "NAME:tiny\r\nTYPE : TSP\r\nDIMENSION :  3\r\nEDGE_WEIGHT_TYPE   :EUC_2D\r\nNODE_COORD_SECTION\r\n1 0 0\r\n2   3.5 4\r\n3\t1e1 2\r\nEOF\r\n";
        let inst = parse_tsplib(text).unwrap();
        assert_eq!(inst.len(), 3);
        assert_eq!(inst.name.as_deref(), Some("tiny"));
        assert_eq!(inst.point(2), Point::new(10.0, 2.0));
    }

    #[test]
    fn errors() {
        let short =
            "NAME : x\nDIMENSION : 5\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 0\n3 1 1\n4 0 1\nEOF\n";
        assert!(matches!(parse_tsplib(short), Err(Error::Format { .. })));
        let geo = "DIMENSION : 1\nEDGE_WEIGHT_TYPE : GEO\nNODE_COORD_SECTION\n1 0 0\n";
        assert!(matches!(parse_tsplib(geo), Err(Error::Unsupported(_))));
        let no_dim = "EDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n";
        assert!(matches!(parse_tsplib(no_dim), Err(Error::Format { .. })));
        let no_section = "DIMENSION : 1\nEDGE_WEIGHT_TYPE : EUC_2D\nEOF\n";
        assert!(matches!(parse_tsplib(no_section), Err(Error::Format { .. })));
        // Keys are case-sensitive.
        let lower = "dimension : 1\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n";
        assert!(matches!(parse_tsplib(lower), Err(Error::Format { .. })));
    }

    #[test]
    fn tour_file() {
        let t = parse_tsplib_tour("NAME : a\nTOUR_SECTION\n1\n3 2\n-1\nEOF\n").unwrap();
        assert_eq!(t.order, vec![0, 2, 1]);
    }
}
