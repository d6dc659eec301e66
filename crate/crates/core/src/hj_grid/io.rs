//! Binary container for grid solutions and CSV export of level sets.
//!
//! Layout (little endian): magic `PMPGRID1`, dimension count (u32), per axis
//! `min, max` (f64) and `count` (u64), `gamma`, `dt` (f64), slice count
//! (u64), FNV-1a hash of the system id (u64), id length (u64) and UTF-8
//! bytes, then all slices back to back as f64.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Axis, GridError, GridSpec, GridValueFunction, LevelSet};

const MAGIC: &[u8; 8] = b"PMPGRID1";

pub fn system_id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn write_grid<W: Write>(vf: &GridValueFunction, mut w: W) -> Result<(), GridError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(vf.spec.dim() as u32)?;
    for a in &vf.spec.axes {
        w.write_f64::<LE>(a.min)?;
        w.write_f64::<LE>(a.max)?;
        w.write_u64::<LE>(a.count as u64)?;
    }
    w.write_f64::<LE>(vf.gamma)?;
    w.write_f64::<LE>(vf.dt)?;
    w.write_u64::<LE>(vf.slices.len() as u64)?;
    w.write_u64::<LE>(system_id_hash(&vf.system_id))?;
    w.write_u64::<LE>(vf.system_id.len() as u64)?;
    w.write_all(vf.system_id.as_bytes())?;
    for s in &vf.slices {
        for v in s {
            w.write_f64::<LE>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<GridValueFunction, GridError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GridError::Format("bad magic".into()));
    }
    let dim = r.read_u32::<LE>()? as usize;
    if dim == 0 || dim > super::MAX_DIM {
        return Err(GridError::Format(format!("dimension {dim}")));
    }
    let mut axes = Vec::with_capacity(dim);
    for _ in 0..dim {
        let min = r.read_f64::<LE>()?;
        let max = r.read_f64::<LE>()?;
        let count = r.read_u64::<LE>()? as usize;
        axes.push(Axis::new(min, max, count)?);
    }
    let spec = GridSpec::new(axes)?;
    let gamma = r.read_f64::<LE>()?;
    let dt = r.read_f64::<LE>()?;
    let n_slices = r.read_u64::<LE>()? as usize;
    let hash = r.read_u64::<LE>()?;
    let id_len = r.read_u64::<LE>()? as usize;
    if id_len > 1 << 16 || n_slices == 0 || n_slices > 1 << 24 {
        return Err(GridError::Format("implausible header".into()));
    }
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let system_id =
        String::from_utf8(id).map_err(|_| GridError::Format("system id is not UTF-8".into()))?;
    if system_id_hash(&system_id) != hash {
        return Err(GridError::Format("system id hash mismatch".into()));
    }
    let mut slices = Vec::with_capacity(n_slices);
    for _ in 0..n_slices {
        let mut s = vec![0.0; spec.len()];
        r.read_f64_into::<LE>(&mut s)?;
        slices.push(s);
    }
    Ok(GridValueFunction {
        spec,
        slices,
        gamma,
        dt,
        system_id,
    })
}

/// One row per point: component index, point index, coordinates.
pub fn write_level_set_csv<W: Write>(ls: &LevelSet, w: W) -> Result<(), GridError> {
    let dim = ls.points().next().map_or(0, Vec::len);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["component".to_string(), "index".to_string()];
    header.extend((0..dim).map(|d| format!("x{d}")));
    out.write_record(&header)?;
    for (c, comp) in ls.components.iter().enumerate() {
        for (i, p) in comp.iter().enumerate() {
            let mut row = vec![c.to_string(), i.to_string()];
            row.extend(p.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GridValueFunction {
        let spec = GridSpec::new(vec![
            Axis::new(-1.0, 1.0, 3).unwrap(),
            Axis::new(0.0, 2.0, 4).unwrap(),
        ])
        .unwrap();
        let s0: Vec<f64> = (0..12).map(|k| k as f64 * 0.1 - 0.3).collect();
        let s1: Vec<f64> = s0.iter().map(|v| v - 1.0 / 3.0).collect();
        GridValueFunction {
            spec,
            slices: vec![s0, s1],
            gamma: 0.5,
            dt: 0.02,
            system_id: "corridor(V=10)".into(),
        }
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let vf = sample();
        let mut buf = Vec::new();
        write_grid(&vf, &mut buf).unwrap();
        assert_eq!(read_grid(buf.as_slice()).unwrap(), vf);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let mut buf = Vec::new();
        write_grid(&sample(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_grid(bad.as_slice()),
            Err(GridError::Format(_))
        ));
        assert!(read_grid(&buf[..buf.len() - 4]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let ls = LevelSet {
            components: vec![vec![vec![3.0, 0.0], vec![3.0, 0.5]], vec![vec![-3.0, 0.0]]],
        };
        let mut buf = Vec::new();
        write_level_set_csv(&ls, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "component,index,x0,x1");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "1,0,-3,0");
    }
}
