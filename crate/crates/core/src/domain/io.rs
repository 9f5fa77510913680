//! Flat binary container with a JSON header for grids and fields, plus CSV
//! export. Grids serialize as their defining data (shape + resolution) and
//! are rebuilt deterministically on load.

use super::{build_grid, DomainSpec, Field, Grid, Rank};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

const MAGIC: &[u8; 8] = b"ECFIELD1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    container: String,
    domain: DomainSpec,
    resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<RankHeader>,
    order: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RankHeader {
    kind: String,
    rows: usize,
    cols: usize,
}

impl RankHeader {
    fn from_rank(rank: Rank) -> Self {
        match rank {
            Rank::Scalar => RankHeader { kind: "scalar".into(), rows: 1, cols: 1 },
            Rank::Vector(k) => RankHeader { kind: "vector".into(), rows: k, cols: 1 },
            Rank::Matrix(k, d) => RankHeader { kind: "matrix".into(), rows: k, cols: d },
        }
    }

    fn to_rank(&self) -> Result<Rank> {
        match self.kind.as_str() {
            "scalar" => Ok(Rank::Scalar),
            "vector" => Ok(Rank::Vector(self.rows)),
            "matrix" => Ok(Rank::Matrix(self.rows, self.cols)),
            other => Err(CoreError::Container(format!("unknown rank kind {other}"))),
        }
    }
}

fn write_container(path: &Path, header: &Header, payload: &[f64]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header_bytes = serde_json::to_vec(header)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Container("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(CoreError::Container("payload is not a multiple of 8 bytes".into()));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let header = Header {
        container: "grid".into(),
        domain: grid.spec.clone(),
        resolution: grid.resolution[0],
        rank: None,
        order: "row-major".into(),
    };
    write_container(path, &header, &[])
}

pub fn read_grid(path: &Path) -> Result<Arc<Grid>> {
    let (header, _) = read_container(path)?;
    if header.container != "grid" {
        return Err(CoreError::Container(format!(
            "expected grid container, found {}",
            header.container
        )));
    }
    build_grid(&header.domain, header.resolution)
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let header = Header {
        container: "field".into(),
        domain: field.grid.spec.clone(),
        resolution: field.grid.resolution[0],
        rank: Some(RankHeader::from_rank(field.rank)),
        order: "row-major".into(),
    };
    write_container(path, &header, &field.values)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let (header, payload) = read_container(path)?;
    if header.container != "field" {
        return Err(CoreError::Container(format!(
            "expected field container, found {}",
            header.container
        )));
    }
    let rank = header
        .rank
        .as_ref()
        .ok_or_else(|| CoreError::Container("field container lacks rank".into()))?
        .to_rank()?;
    let grid = build_grid(&header.domain, header.resolution)?;
    if payload.len() != grid.node_count * rank.components() {
        return Err(CoreError::Container(format!(
            "payload length {} does not match {} nodes x {} components",
            payload.len(),
            grid.node_count,
            rank.components()
        )));
    }
    let field = Field { grid, rank, values: payload };
    field.validate()?;
    Ok(field)
}

/// CSV export: one non-exterior node per row, coordinates then values.
pub fn write_field_csv(path: &Path, field: &Field) -> Result<()> {
    let grid = &field.grid;
    let d = grid.dim();
    let c = field.components();
    let mut out = String::new();
    for a in 0..d {
        out.push_str(&format!("x{a},"));
    }
    for j in 0..c {
        out.push_str(&format!("v{j}"));
        out.push(if j + 1 == c { '\n' } else { ',' });
    }
    for &idx32 in &grid.in_nodes {
        let idx = idx32 as usize;
        let p = grid.node_position(idx);
        for a in 0..d {
            out.push_str(&format!("{},", p[a]));
        }
        let vals = field.node_slice(idx);
        for (j, v) in vals.iter().enumerate() {
            out.push_str(&format!("{v}"));
            out.push(if j + 1 == c { '\n' } else { ',' });
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;

    #[test]
    fn field_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("elastocert_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let g = build_grid(&DomainSpec::unit_disk(), 12).unwrap();
        let f = Field::from_fn(g.clone(), Rank::Vector(2), |p, out| {
            out[0] = (p[0] * 3.7).sin();
            out[1] = p[1] * p[0] - 0.25;
        });
        let path = dir.join("f.ecf");
        write_field(&path, &f).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back.values.len(), f.values.len());
        for (a, b) in back.values.iter().zip(&f.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.rank, f.rank);
    }

    #[test]
    fn grid_roundtrip_rebuilds_identically() {
        let dir = std::env::temp_dir().join("elastocert_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let g = build_grid(&DomainSpec::unit_cylinder(), 8).unwrap();
        let path = dir.join("g.ecg");
        write_grid(&path, &g).unwrap();
        let back = read_grid(&path).unwrap();
        assert_eq!(back.node_count, g.node_count);
        assert_eq!(back.in_nodes, g.in_nodes);
        for (a, b) in back.volumes.iter().zip(&g.volumes) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_has_expected_shape() {
        let dir = std::env::temp_dir().join("elastocert_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let g = build_grid(&DomainSpec::interval(0.0, 1.0).unwrap(), 4).unwrap();
        let f = Field::scalar_from_fn(g.clone(), |p| p[0] * 2.0);
        let path = dir.join("f.csv");
        write_field_csv(&path, &f).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,v0");
        assert_eq!(lines.len(), 1 + 5);
    }

    #[test]
    fn rejects_corrupt_container() {
        let dir = std::env::temp_dir().join("elastocert_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ecf");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(read_field(&path).is_err());
    }
}
