//! On-disk containers.
//!
//! Every array container is a directory with a JSON manifest plus raw
//! little-endian `f64` arrays in row-major order:
//!
//! - trajectory: `manifest.json` `{N, T, h, fields}` with `q.f64 (T+1,N,3)`,
//!   `v.f64 (T+1,N,3)` and optionally `f_ext.f64 (T,N,3)`, `f_res.f64 (T,N,3)`;
//! - marker recording: `manifest.json` `{m, T, rate_hz}` with
//!   `markers.f64 (T,m,3)` where `T` counts frames;
//! - dataset: one trajectory directory per entry plus a top-level
//!   `splits.json` listing train/val/test trajectory ids.
//!
//! CSV emitters use the shortest round-trip float formatting, so every file
//! re-reads to bit-identical values.

use crate::error::{Error, Result};
use crate::sim::SimState;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};
use std::path::Path;

pub fn write_f64_array(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_f64_array(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Container(format!(
            "{} has length {} not divisible by 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    #[serde(rename = "N")]
    pub n_nodes: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub h: f64,
    pub fields: Vec<String>,
}

/// Writes a trajectory container; `f_ext`/`f_res` hold one force field per
/// step when present.
pub fn write_trajectory(
    dir: &Path,
    h: f64,
    states: &[SimState],
    f_ext: Option<&[Vec<f64>]>,
    f_res: Option<&[Vec<f64>]>,
) -> Result<()> {
    if states.is_empty() {
        return Err(Error::Container("trajectory with no states".into()));
    }
    std::fs::create_dir_all(dir)?;
    let n = states[0].q.len() / 3;
    let steps = states.len() - 1;
    let mut fields = vec!["q".to_string(), "v".to_string()];
    let mut q = Vec::with_capacity(states.len() * n * 3);
    let mut v = Vec::with_capacity(states.len() * n * 3);
    for s in states {
        q.extend_from_slice(&s.q);
        v.extend_from_slice(&s.v);
    }
    write_f64_array(&dir.join("q.f64"), &q)?;
    write_f64_array(&dir.join("v.f64"), &v)?;
    for (name, arr) in [("f_ext", f_ext), ("f_res", f_res)] {
        if let Some(frames) = arr {
            if frames.len() != steps {
                return Err(Error::Container(format!(
                    "{name} has {} frames, expected {steps}",
                    frames.len()
                )));
            }
            let flat: Vec<f64> = frames.iter().flatten().copied().collect();
            write_f64_array(&dir.join(format!("{name}.f64")), &flat)?;
            fields.push(name.to_string());
        }
    }
    let manifest = TrajectoryManifest {
        n_nodes: n,
        steps,
        h,
        fields,
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

pub struct TrajectoryData {
    pub manifest: TrajectoryManifest,
    pub states: Vec<SimState>,
    pub f_ext: Option<Vec<Vec<f64>>>,
    pub f_res: Option<Vec<Vec<f64>>>,
}

pub fn read_trajectory(dir: &Path) -> Result<TrajectoryData> {
    let manifest: TrajectoryManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    let n = manifest.n_nodes;
    let frames = manifest.steps + 1;
    let q = read_f64_array(&dir.join("q.f64"))?;
    let v = read_f64_array(&dir.join("v.f64"))?;
    if q.len() != frames * n * 3 || v.len() != frames * n * 3 {
        return Err(Error::Container(format!(
            "state arrays in {} do not match manifest",
            dir.display()
        )));
    }
    let states: Vec<SimState> = (0..frames)
        .map(|t| SimState {
            q: q[t * n * 3..(t + 1) * n * 3].to_vec(),
            v: v[t * n * 3..(t + 1) * n * 3].to_vec(),
            t,
        })
        .collect();
    let read_force = |name: &str| -> Result<Option<Vec<Vec<f64>>>> {
        if !manifest.fields.iter().any(|f| f == name) {
            return Ok(None);
        }
        let flat = read_f64_array(&dir.join(format!("{name}.f64")))?;
        if flat.len() != manifest.steps * n * 3 {
            return Err(Error::Container(format!("{name} array size mismatch")));
        }
        Ok(Some(
            (0..manifest.steps)
                .map(|t| flat[t * n * 3..(t + 1) * n * 3].to_vec())
                .collect(),
        ))
    };
    let f_ext = read_force("f_ext")?;
    let f_res = read_force("f_res")?;
    Ok(TrajectoryData {
        manifest,
        states,
        f_ext,
        f_res,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerManifest {
    pub m: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub rate_hz: f64,
}

pub fn write_markers(dir: &Path, rate_hz: f64, frames: &[Vec<[f64; 3]>]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Container("marker file with no frames".into()));
    }
    std::fs::create_dir_all(dir)?;
    let m = frames[0].len();
    let mut flat = Vec::with_capacity(frames.len() * m * 3);
    for frame in frames {
        if frame.len() != m {
            return Err(Error::Container("ragged marker frames".into()));
        }
        for p in frame {
            flat.extend_from_slice(p);
        }
    }
    write_f64_array(&dir.join("markers.f64"), &flat)?;
    let manifest = MarkerManifest {
        m,
        frames: frames.len(),
        rate_hz,
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

pub fn read_markers(dir: &Path) -> Result<(MarkerManifest, Vec<Vec<[f64; 3]>>)> {
    let manifest: MarkerManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    let flat = read_f64_array(&dir.join("markers.f64"))?;
    if flat.len() != manifest.frames * manifest.m * 3 {
        return Err(Error::Container("marker array size mismatch".into()));
    }
    let frames = (0..manifest.frames)
        .map(|t| {
            (0..manifest.m)
                .map(|i| {
                    let o = (t * manifest.m + i) * 3;
                    [flat[o], flat[o + 1], flat[o + 2]]
                })
                .collect()
        })
        .collect();
    Ok((manifest, frames))
}

/// Writes rows as CSV with full round-trip float formatting.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Container("empty CSV".into()))??
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Container(format!("bad CSV number {tok:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f64");
        let data = vec![0.0, -1.5, std::f64::consts::PI, 1e-300, f64::MAX];
        write_f64_array(&path, &data).unwrap();
        assert_eq!(read_f64_array(&path).unwrap(), data);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let n = 4;
        let states: Vec<SimState> = (0..3)
            .map(|t| SimState {
                q: (0..3 * n).map(|i| (t * n + i) as f64 * 0.1).collect(),
                v: (0..3 * n).map(|i| -((t + i) as f64)).collect(),
                t,
            })
            .collect();
        let f_ext: Vec<Vec<f64>> = (0..2).map(|t| vec![t as f64; 3 * n]).collect();
        write_trajectory(dir.path(), 0.01, &states, Some(&f_ext), None).unwrap();
        let back = read_trajectory(dir.path()).unwrap();
        assert_eq!(back.manifest.n_nodes, n);
        assert_eq!(back.manifest.steps, 2);
        assert_eq!(back.manifest.h, 0.01);
        for (a, b) in back.states.iter().zip(&states) {
            assert_eq!(a.q, b.q);
            assert_eq!(a.v, b.v);
        }
        assert_eq!(back.f_ext.unwrap(), f_ext);
        assert!(back.f_res.is_none());
    }

    #[test]
    fn manifest_field_names_are_stable() {
        // The JSON keys are part of the file format.
        let dir = tempfile::tempdir().unwrap();
        let states = vec![SimState {
            q: vec![0.0; 3],
            v: vec![0.0; 3],
            t: 0,
        }];
        write_trajectory(dir.path(), 0.5, &states, None, None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(json.get("N").is_some());
        assert!(json.get("T").is_some());
        assert!(json.get("h").is_some());
        assert!(json.get("fields").is_some());
    }

    #[test]
    fn markers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Vec<[f64; 3]>> = (0..5)
            .map(|t| {
                (0..3)
                    .map(|i| [t as f64, i as f64, 0.25 * (t + i) as f64])
                    .collect()
            })
            .collect();
        write_markers(dir.path(), 100.0, &frames).unwrap();
        let (manifest, back) = read_markers(dir.path()).unwrap();
        assert_eq!(manifest.m, 3);
        assert_eq!(manifest.frames, 5);
        assert_eq!(back, frames);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec![1.0, 2.5e-17, -3.125],
            vec![0.1 + 0.2, f64::MIN_POSITIVE, 528.0],
        ];
        write_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let (header, back) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["a", "b", "c"]);
        assert_eq!(back, rows);
    }
}
