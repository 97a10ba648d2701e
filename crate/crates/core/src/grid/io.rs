//! Demand tensor files: one JSON header line followed by the counts as
//! little-endian `u32`, k-major, then `i`, then `j`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DemandTensor, GridSpec};
use crate::{Error, Result};

const FORMAT: &str = "bikedemand-tensor";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    /// `[bins, width, height]`
    shape: [usize; 3],
    grid: GridSpec,
    scale_max: Option<f64>,
}

pub fn write_tensor(path: &Path, d: &DemandTensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, d).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_to<W: Write>(w: &mut W, d: &DemandTensor) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        shape: [d.bins(), d.width(), d.height()],
        grid: d.grid.clone(),
        scale_max: d.scale_max,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for v in d.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DemandTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Data(format!("{}: bad tensor header: {e}", path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Data(format!(
            "{}: not a {FORMAT} v{VERSION} file",
            path.display()
        )));
    }
    let [bins, w, h] = header.shape;
    if header.grid.width != w || header.grid.height != h {
        return Err(Error::Data(format!("{}: header shape disagrees with grid", path.display())));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != bins * w * h * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            bins * w * h * 4,
            raw.len()
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut d = DemandTensor::from_values(header.grid, bins, values)?;
    d.scale_max = header.scale_max;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GeoPoint;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut grid = GridSpec::synthetic(3, 2);
        grid.origin = GeoPoint { lon: -0.1278, lat: 51.507_351_1 };
        grid.t0 = 1_561_939_200;
        grid.utc_offset_s = 3600;
        let values = (0..4 * 6).map(|v| (v * 2_654_435_761u64 % 4_000_000_007) as u32).collect();
        let mut d = DemandTensor::from_values(grid, 4, values).unwrap();
        d.scale_max = Some(0.1 + 0.2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor(&p, &d).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, d);
        let p2 = dir.path().join("t2.bin");
        write_tensor(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let d = DemandTensor::zeros(GridSpec::synthetic(2, 2), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tensor(&p, &d).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Data(_))));
    }
}
