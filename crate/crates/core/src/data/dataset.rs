//! The labeled dataset `D^t`: instances, their current best tours and the
//! improvement iteration that produced them.
//!
//! Text format (version 1), one record per line, fields separated by tabs:
//!
//! ```text
//! localescape-dataset  1  <count>  <iteration>
//! <index>  <name>  <n>  <x0 y0 x1 y1 ...>  <order ...>  <length>  <crc32>
//! ```
//!
//! `<name>` is `-` when absent and `=` followed by the name otherwise.
//! Floats are written in shortest round-trip form, so coordinates survive
//! bit-exactly. `<crc32>` is the lowercase hex CRC-32 of the record text
//! preceding its final tab.
//!
//! The binary alternative starts with the magic `LEDSBIN\0` and stores the
//! same fields little-endian, each record followed by its CRC-32.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::instance::{closed_length_unchecked, validate_tour, Point, Tour, TspInstance};

pub const DATASET_VERSION: u32 = 1;
const TEXT_MAGIC: &str = "localescape-dataset";
const BINARY_MAGIC: &[u8; 8] = b"LEDSBIN\0";
/// Tolerance between a stored length and its recomputation.
pub const LENGTH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub instances: Vec<TspInstance>,
    pub labels: Vec<Tour>,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Text,
    Binary,
}

impl LabeledDataset {
    pub fn new(instances: Vec<TspInstance>, labels: Vec<Tour>, iteration: u64) -> Result<Self> {
        let ds = LabeledDataset { instances, labels, iteration };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.len() != self.labels.len() {
            return Err(Error::format(
                None,
                format!("{} instances but {} labels", self.instances.len(), self.labels.len()),
            ));
        }
        for (i, (inst, label)) in self.instances.iter().zip(&self.labels).enumerate() {
            validate_tour(inst, label).map_err(|v| Error::format(Some(i), format!("label: {v}")))?;
        }
        Ok(())
    }

    pub fn label_lengths(&self) -> Vec<f64> {
        self.instances.iter().zip(&self.labels).map(|(inst, t)| closed_length_unchecked(inst, &t.order)).collect()
    }

    pub fn mean_label_length(&self) -> f64 {
        let l = self.label_lengths();
        l.iter().sum::<f64>() / l.len().max(1) as f64
    }
}

/// Checks the per-instance monotonicity `L(next_i) <= L(prev_i)` between two
/// consecutive snapshots and that the iteration counter advanced.
pub fn check_snapshot_progress(prev: &LabeledDataset, next: &LabeledDataset) -> Result<()> {
    if next.iteration < prev.iteration {
        return Err(Error::format(
            None,
            format!("iteration went backwards: {} after {}", next.iteration, prev.iteration),
        ));
    }
    if prev.len() != next.len() {
        return Err(Error::format(None, "snapshots hold different instance counts"));
    }
    for (i, (a, b)) in prev.label_lengths().iter().zip(next.label_lengths()).enumerate() {
        if b > *a {
            return Err(Error::format(Some(i), format!("label length increased from {a} to {b}")));
        }
    }
    Ok(())
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let bytes = match format {
        DatasetFormat::Text => encode_text(ds)?.into_bytes(),
        DatasetFormat::Binary => encode_binary(ds),
    };
    write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&read_file(path)?)
}

/// True when `bytes` start like a dataset file in either format.
pub fn is_dataset(bytes: &[u8]) -> bool {
    bytes.starts_with(BINARY_MAGIC) || bytes.starts_with(TEXT_MAGIC.as_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::format(None, format!("not UTF-8: {e}")))?;
        decode_text(text)
    }
}

fn checked_lengths(ds: &LabeledDataset) -> Result<Vec<f64>> {
    ds.validate()?;
    Ok(ds.label_lengths())
}

pub fn encode_text(ds: &LabeledDataset) -> Result<String> {
    use std::fmt::Write as _;
    let lengths = checked_lengths(ds)?;
    let mut out = format!("{TEXT_MAGIC}\t{DATASET_VERSION}\t{}\t{}\n", ds.len(), ds.iteration);
    for (i, ((inst, tour), len)) in ds.instances.iter().zip(&ds.labels).zip(lengths).enumerate() {
        let name = match &inst.name {
            None => "-".to_string(),
            Some(n) if n.contains(['\t', '\n', '\r']) => {
                return Err(Error::format(Some(i), "instance name contains a tab or newline"));
            }
            Some(n) => format!("={n}"),
        };
        let mut rec = format!("{i}\t{name}\t{}\t", inst.len());
        for (j, p) in inst.coords().iter().enumerate() {
            if j > 0 {
                rec.push(' ');
            }
            write!(rec, "{:?} {:?}", p.x, p.y).unwrap();
        }
        rec.push('\t');
        for (j, v) in tour.order.iter().enumerate() {
            if j > 0 {
                rec.push(' ');
            }
            write!(rec, "{v}").unwrap();
        }
        write!(rec, "\t{len:?}").unwrap();
        let crc = crc32fast::hash(rec.as_bytes());
        writeln!(out, "{rec}\t{crc:08x}").unwrap();
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(rec: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::format(Some(rec), format!("bad {what} `{s}`")))
}

fn check_version(found: u32) -> Result<()> {
    if found != DATASET_VERSION {
        return Err(Error::Version { expected: DATASET_VERSION, found });
    }
    Ok(())
}

fn finish_record(
    rec: usize,
    coords: Vec<Point>,
    name: Option<String>,
    order: Vec<usize>,
    stored: f64,
) -> Result<(TspInstance, Tour)> {
    let inst = TspInstance::new(coords).map_err(|e| Error::format(Some(rec), e.to_string()))?;
    let inst = match name {
        Some(n) => inst.with_name(n),
        None => inst,
    };
    let tour = Tour::new(order);
    validate_tour(&inst, &tour).map_err(|v| Error::format(Some(rec), format!("label: {v}")))?;
    let len = closed_length_unchecked(&inst, &tour.order);
    if (len - stored).abs() > LENGTH_TOLERANCE * len.abs().max(1.0) {
        return Err(Error::format(Some(rec), format!("stored length {stored} but label scores {len}")));
    }
    Ok((inst, tour))
}

pub fn decode_text(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::format(None, "empty file"))?;
    let h: Vec<&str> = head.split('\t').collect();
    if h.len() != 4 || h[0] != TEXT_MAGIC {
        return Err(Error::format(None, "not a dataset file"));
    }
    check_version(parse_field(0, "version", h[1])?)?;
    let count: usize = parse_field(0, "count", h[2])?;
    let iteration: u64 = parse_field(0, "iteration", h[3])?;

    let mut instances = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in 0..count {
        let line = lines.next().ok_or_else(|| Error::format(Some(rec), "missing record"))?;
        let (body, crc) = line.rsplit_once('\t').ok_or_else(|| Error::format(Some(rec), "missing checksum"))?;
        let crc = u32::from_str_radix(crc, 16).map_err(|_| Error::format(Some(rec), "bad checksum field"))?;
        if crc32fast::hash(body.as_bytes()) != crc {
            return Err(Error::Checksum(rec));
        }
        let f: Vec<&str> = body.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::format(Some(rec), format!("expected 6 fields, found {}", f.len())));
        }
        let index: usize = parse_field(rec, "index", f[0])?;
        if index != rec {
            return Err(Error::format(Some(rec), format!("record index {index} out of sequence")));
        }
        let name = match f[1] {
            "-" => None,
            s => Some(s.strip_prefix('=').ok_or_else(|| Error::format(Some(rec), "bad name field"))?.to_string()),
        };
        let n: usize = parse_field(rec, "n", f[2])?;
        let nums = f[3].split(' ').map(|s| parse_field::<f64>(rec, "coordinate", s)).collect::<Result<Vec<_>>>()?;
        if nums.len() != 2 * n {
            return Err(Error::format(Some(rec), format!("expected {} coordinates, found {}", 2 * n, nums.len())));
        }
        let coords = nums.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
        let order = if f[4].is_empty() {
            Vec::new()
        } else {
            f[4].split(' ').map(|s| parse_field(rec, "node", s)).collect::<Result<Vec<usize>>>()?
        };
        let stored: f64 = parse_field(rec, "length", f[5])?;
        let (inst, tour) = finish_record(rec, coords, name, order, stored)?;
        instances.push(inst);
        labels.push(tour);
    }
    if lines.any(|l| !l.is_empty()) {
        return Err(Error::format(Some(count), "trailing data after last record"));
    }
    Ok(LabeledDataset { instances, labels, iteration })
}

pub fn encode_binary(ds: &LabeledDataset) -> Vec<u8> {
    let lengths = ds.label_lengths();
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&ds.iteration.to_le_bytes());
    for ((inst, tour), len) in ds.instances.iter().zip(&ds.labels).zip(lengths) {
        let mut rec = Vec::new();
        match &inst.name {
            None => rec.extend_from_slice(&u32::MAX.to_le_bytes()),
            Some(n) => {
                rec.extend_from_slice(&(n.len() as u32).to_le_bytes());
                rec.extend_from_slice(n.as_bytes());
            }
        }
        rec.extend_from_slice(&(inst.len() as u64).to_le_bytes());
        for p in inst.coords() {
            rec.extend_from_slice(&p.x.to_le_bytes());
            rec.extend_from_slice(&p.y.to_le_bytes());
        }
        for &v in &tour.order {
            rec.extend_from_slice(&(v as u64).to_le_bytes());
        }
        rec.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
        out.extend_from_slice(&crc32fast::hash(&rec).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    rec: Option<usize>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.buf.len() < k {
            return Err(Error::format(self.rec, "unexpected end of data"));
        }
        let (head, tail) = self.buf.split_at(k);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        // Anything longer than the remaining buffer is corrupt; bail before allocating.
        if v > self.buf.len() as u64 {
            return Err(Error::format(self.rec, format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader { buf: bytes, rec: None };
    if r.take(8)? != BINARY_MAGIC {
        return Err(Error::format(None, "not a binary dataset file"));
    }
    check_version(r.u32()?)?;
    let count = r.len("count")?;
    let iteration = r.u64()?;
    let mut instances = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in 0..count {
        r.rec = Some(rec);
        let size = r.len("record size")?;
        let body = r.take(size)?;
        if crc32fast::hash(body) != r.u32()? {
            return Err(Error::Checksum(rec));
        }
        let mut b = Reader { buf: body, rec: Some(rec) };
        let name_len = b.u32()?;
        let name = if name_len == u32::MAX {
            None
        } else {
            let raw = b.take(name_len as usize)?;
            Some(String::from_utf8(raw.to_vec()).map_err(|_| Error::format(Some(rec), "name is not UTF-8"))?)
        };
        let n = b.len("node count")?;
        let coords = (0..n).map(|_| Ok(Point::new(b.f64()?, b.f64()?))).collect::<Result<Vec<_>>>()?;
        let order = (0..n).map(|_| Ok(b.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let stored = b.f64()?;
        if !b.buf.is_empty() {
            return Err(Error::format(Some(rec), "record has trailing bytes"));
        }
        let (inst, tour) = finish_record(rec, coords, name, order, stored)?;
        instances.push(inst);
        labels.push(tour);
    }
    if !r.buf.is_empty() {
        return Err(Error::format(Some(count), "trailing data after last record"));
    }
    Ok(LabeledDataset { instances, labels, iteration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_uniform, random_insertion};

    fn sample(count: usize, t: u64) -> LabeledDataset {
        let instances: Vec<_> = (0..count)
            .map(|i| {
                let inst = generate_uniform(5 + i, i as u64).unwrap();
                if i % 2 == 0 {
                    inst.with_name(format!("inst {i}"))
                } else {
                    inst
                }
            })
            .collect();
        let labels = instances.iter().map(|inst| random_insertion(inst, 3)).collect();
        LabeledDataset::new(instances, labels, t).unwrap()
    }

    #[test]
    fn text_and_binary_round_trip() {
        let ds = sample(3, 7);
        assert_eq!(decode_text(&encode_text(&ds).unwrap()).unwrap(), ds);
        assert_eq!(decode_binary(&encode_binary(&ds)).unwrap(), ds);
        assert_eq!(decode_dataset(&encode_binary(&ds)).unwrap().iteration, 7);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(3, 2);
        for (fmt, name) in [(DatasetFormat::Text, "a.txt"), (DatasetFormat::Binary, "a.bin")] {
            let p = dir.path().join(name);
            save_dataset(&ds, &p, fmt).unwrap();
            assert_eq!(load_dataset(&p).unwrap(), ds);
        }
    }

    #[test]
    fn version_mismatch() {
        let text = encode_text(&sample(1, 0)).unwrap().replacen("\t1\t", "\t2\t", 1);
        assert!(matches!(decode_text(&text), Err(Error::Version { expected: 1, found: 2 })));
        let mut bin = encode_binary(&sample(1, 0));
        bin[8] = 9;
        assert!(matches!(decode_binary(&bin), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn tampering_detected() {
        let ds = sample(3, 1);
        let text = encode_text(&ds).unwrap();
        let line_start = text.match_indices('\n').nth(1).unwrap().0 + 1;
        let coord = line_start + text[line_start..].find("\t0.").unwrap() + 3;
        let mut bytes = text.into_bytes();
        bytes[coord] = if bytes[coord] == b'5' { b'6' } else { b'5' };
        assert!(matches!(decode_dataset(&bytes), Err(Error::Checksum(1))));

        let mut bin = encode_binary(&ds);
        let last = bin.len() - 20;
        bin[last] ^= 0x01;
        assert!(matches!(decode_binary(&bin), Err(Error::Checksum(2))));
    }

    #[test]
    fn corrupt_record_reports_index() {
        let text = encode_text(&sample(2, 0)).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(decode_text(&truncated), Err(Error::Format { record: Some(1), .. })));
    }

    #[test]
    fn snapshot_progress() {
        let a = sample(2, 0);
        let mut b = a.clone();
        b.iteration = 1;
        check_snapshot_progress(&a, &b).unwrap();
        b.iteration = 0;
        b.labels[1] = Tour::new(vec![0, 2, 1, 3, 4, 5]);
        let worse = b.label_lengths()[1] > a.label_lengths()[1];
        assert_eq!(check_snapshot_progress(&a, &b).is_err(), worse);
    }
}
