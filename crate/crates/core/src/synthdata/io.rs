//! On-disk dataset layout:
//!
//! ```text
//! <dir>/train/manifest.txt
//! <dir>/train/vol_<id>.img   f32 little-endian, [slice, height, width]
//! <dir>/train/vol_<id>.lbl   u8, [slice, class, height, width] (labeled volumes only)
//! <dir>/val/...
//! <dir>/test/...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DatasetSplit, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "segclr-dataset 1";

fn write_manifest(split: &str, volumes: &[Volume]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "split {split}");
    let _ = writeln!(s, "volumes {}", volumes.len());
    for v in volumes {
        let _ = writeln!(s);
        let _ = writeln!(s, "volume {}", v.volume_id);
        let _ = writeln!(s, "domain {}", v.domain_id);
        let _ = writeln!(s, "shape {} {} {}", v.n_slices, v.height, v.width);
        let _ = writeln!(
            s,
            "resolution {} {} {}",
            v.resolution.0, v.resolution.1, v.resolution.2
        );
        let _ = writeln!(s, "classes {}", v.class_set.join(","));
        let labeled: Vec<String> = v.labeled_slice_indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "labeled {}", labeled.join(" "));
        let _ = writeln!(s, "labels {}", if v.labels.is_some() { "yes" } else { "no" });
    }
    s
}

fn write_split(dir: &Path, split: &str, volumes: &[Volume]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in volumes {
        v.validate()?;
        let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
        for x in &v.voxels {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let img = dir.join(format!("vol_{}.img", v.volume_id));
        fs::write(&img, bytes).map_err(|e| Error::io(&img, e))?;
        let lbl = dir.join(format!("vol_{}.lbl", v.volume_id));
        if let Some(labels) = &v.labels {
            fs::write(&lbl, labels).map_err(|e| Error::io(&lbl, e))?;
        } else if lbl.exists() {
            fs::remove_file(&lbl).map_err(|e| Error::io(&lbl, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, write_manifest(split, volumes)).map_err(|e| Error::io(&path, e))
}

pub fn save_dataset(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<()> {
    for (name, volumes) in split.parts() {
        write_split(&dir.as_ref().join(name), name, volumes)?;
    }
    Ok(())
}

#[derive(Default)]
struct Record {
    volume_id: String,
    domain_id: Option<String>,
    shape: Option<(usize, usize, usize)>,
    resolution: Option<(f64, f64, f64)>,
    classes: Option<Vec<String>>,
    labeled: Option<Vec<usize>>,
    has_labels: Option<bool>,
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<Record>> {
    let bad = |line: usize, msg: &str| Error::format(path, format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(Error::format(path, "missing `segclr-dataset 1` header")),
    }
    let mut declared: Option<usize> = None;
    let mut records: Vec<Record> = Vec::new();
    for (i, raw) in lines {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        let value = value.trim();
        let nums = |n: usize| -> Result<Vec<f64>> {
            let v: std::result::Result<Vec<f64>, _> =
                value.split_whitespace().map(str::parse::<f64>).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(bad(ln, &format!("`{key}` expects {n} numbers"))),
            }
        };
        match key {
            "split" => {}
            "volumes" => {
                declared = Some(value.parse().map_err(|_| bad(ln, "bad volume count"))?)
            }
            "volume" => records.push(Record {
                volume_id: value.to_string(),
                ..Record::default()
            }),
            _ => {
                let rec = records
                    .last_mut()
                    .ok_or_else(|| bad(ln, "field before first `volume` record"))?;
                match key {
                    "domain" => rec.domain_id = Some(value.to_string()),
                    "shape" => {
                        let v = nums(3)?;
                        if v.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                            return Err(bad(ln, "shape entries must be positive integers"));
                        }
                        rec.shape = Some((v[0] as usize, v[1] as usize, v[2] as usize));
                    }
                    "resolution" => {
                        let v = nums(3)?;
                        rec.resolution = Some((v[0], v[1], v[2]));
                    }
                    "classes" => {
                        rec.classes = Some(value.split(',').map(|c| c.trim().to_string()).collect())
                    }
                    "labeled" => {
                        let v: std::result::Result<Vec<usize>, _> =
                            value.split_whitespace().map(str::parse).collect();
                        rec.labeled = Some(v.map_err(|_| bad(ln, "bad labeled slice index"))?);
                    }
                    "labels" => {
                        rec.has_labels = Some(match value {
                            "yes" => true,
                            "no" => false,
                            _ => return Err(bad(ln, "`labels` must be yes or no")),
                        })
                    }
                    other => return Err(bad(ln, &format!("unknown key `{other}`"))),
                }
            }
        }
    }
    match declared {
        Some(n) if n == records.len() => Ok(records),
        Some(n) => Err(Error::format(
            path,
            format!("manifest declares {n} volumes but lists {}", records.len()),
        )),
        None => Err(Error::format(path, "missing `volumes` count")),
    }
}

/// Loads one split directory (the one holding `manifest.txt`).
pub fn load_split(dir: impl AsRef<Path>) -> Result<Vec<Volume>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for rec in parse_manifest(&path, &text)? {
        let missing = |f: &str| Error::format(&path, format!("volume {}: missing `{f}`", rec.volume_id));
        let (n_slices, height, width) = rec.shape.ok_or_else(|| missing("shape"))?;
        let class_set = rec.classes.clone().ok_or_else(|| missing("classes"))?;
        let plane = height * width;

        let img = dir.join(format!("vol_{}.img", rec.volume_id));
        let bytes = fs::read(&img).map_err(|e| Error::io(&img, e))?;
        if bytes.len() != n_slices * plane * 4 {
            return Err(Error::format(
                &img,
                format!(
                    "shape mismatch: manifest advertises {n_slices}x{height}x{width} f32 ({} bytes), payload has {} bytes",
                    n_slices * plane * 4,
                    bytes.len()
                ),
            ));
        }
        let voxels: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let labels = if rec.has_labels.ok_or_else(|| missing("labels"))? {
            let lbl = dir.join(format!("vol_{}.lbl", rec.volume_id));
            let bytes = fs::read(&lbl).map_err(|e| Error::io(&lbl, e))?;
            let want = n_slices * class_set.len() * plane;
            if bytes.len() != want {
                return Err(Error::format(
                    &lbl,
                    format!(
                        "shape mismatch: manifest advertises {want} label bytes, payload has {}",
                        bytes.len()
                    ),
                ));
            }
            Some(bytes)
        } else {
            None
        };
        let v = Volume {
            volume_id: rec.volume_id.clone(),
            domain_id: rec.domain_id.clone().ok_or_else(|| missing("domain"))?,
            n_slices,
            height,
            width,
            voxels,
            labels,
            class_set,
            labeled_slice_indices: rec.labeled.clone().ok_or_else(|| missing("labeled"))?,
            resolution: rec.resolution.ok_or_else(|| missing("resolution"))?,
        };
        v.validate()
            .map_err(|e| Error::format(&path, format!("volume {}: {e}", v.volume_id)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    Ok(DatasetSplit {
        train: load_split(dir.join("train"))?,
        val: load_split(dir.join("val"))?,
        test: load_split(dir.join("test"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_domain, split_dataset, DomainSpec};

    fn split() -> DatasetSplit {
        let mut s = DomainSpec::desk("D1", 4);
        s.slice_shape = (16, 24);
        s.slices_per_volume = 3;
        s.in_plane_resolution = (0.1, 1.0 / 3.0);
        let mut vols = generate_domain(&s, 5).unwrap();
        vols[1].labels = None;
        vols[1].labeled_slice_indices.clear();
        vols[2].labeled_slice_indices = vec![2];
        split_dataset(vols, (0.75, 0.0, 0.25), 0).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let s = split();
        assert!(s.val.is_empty());
        save_dataset(&s, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let s = split();
        save_dataset(&s, dir.path()).unwrap();
        let m = dir.path().join("train").join(MANIFEST_FILE);
        let text = fs::read_to_string(&m).unwrap();
        let v = &s.train[0];
        let patched = text.replacen(
            &format!("shape {} {} {}", v.n_slices, v.height, v.width),
            &format!("shape {} {} {}", v.n_slices + 2, v.height, v.width),
            1,
        );
        fs::write(&m, patched).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&split(), dir.path()).unwrap();
        let m = dir.path().join("test").join(MANIFEST_FILE);
        fs::write(&m, "not a manifest\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
