//! File formats: point-cloud CSV / ascii PLY, and the shared grid
//! serialization (CSV with an `inf` sentinel, raw little-endian binary)
//! used by distance, similarity, and embedding matrices.
//!
//! CSV is the canonical lossless cloud format: column order
//! `x,y,z,r,g,b[,label]`, `.` decimal separator, LF line endings, values
//! printed with Rust's shortest round-trip formatting so save -> load -> save
//! is byte-identical. PLY ascii 1.0 is supported for interchange; its uchar
//! colors quantize to 1/255.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::math::Vec3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    Csv,
    PlyAscii,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    match format {
        CloudFormat::Csv => load_cloud_csv(reader),
        CloudFormat::PlyAscii => load_cloud_ply(reader),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = BufWriter::new(file);
    let res = match format {
        CloudFormat::Csv => write_cloud_csv(cloud, &mut writer),
        CloudFormat::PlyAscii => write_cloud_ply(cloud, &mut writer),
    };
    res.and_then(|_| writer.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_cloud_csv<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    let labeled = cloud.labels().is_some();
    if labeled {
        writeln!(w, "x,y,z,r,g,b,label")?;
    } else {
        writeln!(w, "x,y,z,r,g,b")?;
    }
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i];
        write!(w, "{},{},{},{},{},{}", p[0], p[1], p[2], c[0], c[1], c[2])?;
        if let Some(labels) = cloud.labels() {
            write!(w, ",{}", labels[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn load_cloud_csv<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(line))) => line.trim_end_matches('\r').to_string(),
        Some((_, Err(e))) => return Err(Error::parse(1, e.to_string())),
        None => return Err(Error::parse(1, "empty file, expected csv header")),
    };
    let labeled = match header.as_str() {
        "x,y,z,r,g,b" => false,
        "x,y,z,r,g,b,label" => true,
        other => {
            return Err(Error::parse(
                1,
                format!("unrecognized header {other:?}, expected x,y,z,r,g,b[,label]"),
            ))
        }
    };
    let expected = if labeled { 7 } else { 6 };

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = if labeled { Some(Vec::new()) } else { None };
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::parse(
                line_no,
                format!("expected {expected} columns, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = fields[k]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("column {}: {e}", k + 1)))?;
        }
        if !vals[..3].iter().all(|v| v.is_finite()) {
            return Err(Error::parse(line_no, "non-finite coordinate"));
        }
        if !vals[3..].iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::parse(line_no, "color component outside [0,1]"));
        }
        positions.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
        if let Some(ls) = labels.as_mut() {
            let l: u32 = fields[6]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("label: {e}")))?;
            ls.push(l);
        }
    }
    PointCloud::new(positions, colors, labels)
}

fn write_cloud_ply<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    let labeled = cloud.labels().is_some();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    if labeled {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i];
        let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        write!(
            w,
            "{} {} {} {} {} {}",
            p[0],
            p[1],
            p[2],
            to_u8(c[0]),
            to_u8(c[1]),
            to_u8(c[2])
        )?;
        if let Some(labels) = cloud.labels() {
            write!(w, " {}", labels[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn load_cloud_ply<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut expect = |want: &str| -> Result<()> {
        match lines.next() {
            Some((no, Ok(line))) if line.trim() == want => {
                let _ = no;
                Ok(())
            }
            Some((no, Ok(line))) => Err(Error::parse(no, format!("expected {want:?}, got {line:?}"))),
            Some((no, Err(e))) => Err(Error::parse(no, e.to_string())),
            None => Err(Error::parse(0, format!("truncated header, expected {want:?}"))),
        }
    };
    expect("ply")?;
    expect("format ascii 1.0")?;

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let (no, line) = match lines.next() {
            Some((no, Ok(line))) => (no, line.trim().to_string()),
            Some((no, Err(e))) => return Err(Error::parse(no, e.to_string())),
            None => return Err(Error::parse(0, "truncated header, no end_header")),
        };
        if line == "end_header" {
            break;
        }
        if line.starts_with("comment") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.trim()
                    .parse()
                    .map_err(|e| Error::parse(no, format!("vertex count: {e}")))?,
            );
        } else if line.starts_with("element ") {
            return Err(Error::parse(no, format!("unsupported element: {line:?}")));
        } else if let Some(rest) = line.strip_prefix("property ") {
            let name = rest
                .split_whitespace()
                .last()
                .ok_or_else(|| Error::parse(no, "property without a name"))?;
            properties.push(name.to_string());
        } else {
            return Err(Error::parse(no, format!("unrecognized header line: {line:?}")));
        }
    }
    let n = vertex_count.ok_or_else(|| Error::parse(0, "header missing element vertex"))?;
    let col = |name: &str| -> Result<usize> {
        properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(0, format!("header missing property {name}")))
    };
    let (xi, yi, zi) = (col("x")?, col("y")?, col("z")?);
    let (ri, gi, bi) = (col("red")?, col("green")?, col("blue")?);
    let li = properties.iter().position(|p| p == "label");

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut labels = li.map(|_| Vec::with_capacity(n));
    for _ in 0..n {
        let (no, line) = match lines.next() {
            Some((no, Ok(line))) => (no, line),
            Some((no, Err(e))) => return Err(Error::parse(no, e.to_string())),
            None => return Err(Error::parse(0, format!("expected {n} vertex rows"))),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != properties.len() {
            return Err(Error::parse(
                no,
                format!("expected {} fields, found {}", properties.len(), fields.len()),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|e| Error::parse(no, format!("field {}: {e}", i + 1)))
        };
        let p: Vec3 = [f(xi)?, f(yi)?, f(zi)?];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(no, "non-finite coordinate"));
        }
        positions.push(p);
        colors.push([f(ri)? / 255.0, f(gi)? / 255.0, f(bi)? / 255.0]);
        if let (Some(ls), Some(i)) = (labels.as_mut(), li) {
            let l: u32 = fields[i]
                .parse()
                .map_err(|e| Error::parse(no, format!("label: {e}")))?;
            ls.push(l);
        }
    }
    PointCloud::new(positions, colors, labels)
}

/// Magic prefix of the raw binary grid format: 8-byte tag plus two u32
/// little-endian dimensions make the 16-byte header, followed by row-major
/// little-endian f64 entries.
pub const GRID_MAGIC: &[u8; 8] = b"LEAFGRID";

pub fn write_grid_csv(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), rows * cols);
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        for r in 0..rows {
            for c in 0..cols {
                if c > 0 {
                    write!(w, ",")?;
                }
                // f64 Display prints infinity as the literal `inf`.
                write!(w, "{}", data[r * cols + c])?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_grid_csv(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("expected {c} columns, found {}", fields.len()),
                ))
            }
            _ => {}
        }
        for (k, field) in fields.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|e| Error::parse(line_no, format!("column {}: {e}", k + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

pub fn write_grid_bin(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), rows * cols);
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_grid_bin(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &header[..8] != GRID_MAGIC {
        return Err(Error::invalid(format!(
            "{}: bad magic, not a grid file",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{synth_plant, SynthPlantParams};
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn csv_three_rows_with_labels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(
            &path,
            "x,y,z,r,g,b,label\n0,0,0,0.5,0.5,0.5,0\n1,0,0,0.5,0.5,0.5,1\n2,0,0,0.5,0.5,0.5,1\n",
        )
        .unwrap();
        let cloud = load_cloud(&path, CloudFormat::Csv).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.labels(), Some(&[0u32, 1, 1][..]));
    }

    #[test]
    fn csv_header_only_is_empty_cloud() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "x,y,z,r,g,b\n").unwrap();
        let cloud = load_cloud(&path, CloudFormat::Csv).unwrap();
        assert_eq!(cloud.len(), 0);
        assert!(cloud.labels().is_none());
    }

    #[test]
    fn csv_nan_coordinate_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "x,y,z,r,g,b\n0,0,0,0.5,0.5,0.5\nnan,0,0,0.5,0.5,0.5\n").unwrap();
        match load_cloud(&path, CloudFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_column_count_mismatch_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "x,y,z,r,g,b\n0,0,0,0.5,0.5\n").unwrap();
        match load_cloud(&path, CloudFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let cloud = synth_plant(&SynthPlantParams {
            n_leaves: 4,
            points_per_leaf: 30,
            stem_points: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        save_cloud(&cloud, &a, CloudFormat::Csv).unwrap();
        let loaded = load_cloud(&a, CloudFormat::Csv).unwrap();
        assert_eq!(loaded, cloud);
        save_cloud(&loaded, &b, CloudFormat::Csv).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn empty_cloud_round_trips_as_header_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let cloud = crate::cloud::PointCloud::new(vec![], vec![], Some(vec![])).unwrap();
        save_cloud(&cloud, &path, CloudFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y,z,r,g,b,label\n");
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let cloud = crate::cloud::PointCloud::new(vec![], vec![], None).unwrap();
        let r = save_cloud(&cloud, Path::new("/nonexistent-dir/x.csv"), CloudFormat::Csv);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn ply_round_trip_preserves_positions_and_labels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let cloud = synth_plant(&SynthPlantParams {
            n_leaves: 3,
            points_per_leaf: 10,
            stem_points: 2,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        save_cloud(&cloud, &path, CloudFormat::PlyAscii).unwrap();
        let loaded = load_cloud(&path, CloudFormat::PlyAscii).unwrap();
        assert_eq!(loaded.len(), cloud.len());
        assert_eq!(loaded.positions(), cloud.positions());
        assert_eq!(loaded.labels(), cloud.labels());
        // Colors quantize to 1/255.
        for (a, b) in loaded.colors().iter().zip(cloud.colors()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn grid_csv_writes_inf_sentinel() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.csv");
        write_grid_csv(&path, 2, 2, &[0.0, f64::INFINITY, f64::INFINITY, 0.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0,inf\ninf,0\n");
        let (r, c, data) = read_grid_csv(&path).unwrap();
        assert_eq!((r, c), (2, 2));
        assert!(data[1].is_infinite());
    }

    proptest! {
        #[test]
        fn grid_bin_round_trips(rows in 1usize..10, cols in 1usize..10, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| if i % 7 == 3 { f64::INFINITY } else { rng.gen_range(-1e3..1e3) })
                .collect();
            let dir = tempdir().unwrap();
            let path = dir.path().join("g.bin");
            write_grid_bin(&path, rows, cols, &data).unwrap();
            let (r, c, back) = read_grid_bin(&path).unwrap();
            prop_assert_eq!((r, c), (rows, cols));
            prop_assert_eq!(back, data);
        }
    }
}
