//! Directory and manifest ingestion.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::decode::{decode_image, ImageFormat};
use super::prepare::prepare;
use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Files that could not be ingested, with the reason.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Path {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        out.push(e?.path());
    }
    out.sort();
    Ok(out)
}

fn load_one(path: &Path, size: usize) -> std::result::Result<Tensor<f32>, String> {
    let format = ImageFormat::from_path(path).ok_or("unsupported extension")?;
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let img = decode_image(&bytes, format).map_err(|e| e.to_string())?;
    prepare(&img, size).map_err(|e| e.to_string())
}

fn ingest(
    entries: Vec<(PathBuf, usize)>,
    class_names: Vec<String>,
    size: usize,
) -> Result<(LabeledDataset, LoadReport)> {
    let decoded = par::map_range(entries.len(), |i| load_one(&entries[i].0, size));
    let mut ds = LabeledDataset::new([3, size, size], class_names);
    let mut report = LoadReport::default();
    for ((path, label), img) in entries.into_iter().zip(decoded) {
        match img {
            Ok(img) => ds.push(&img, label, Some(path))?,
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                report.skipped.push((path, reason));
            }
        }
    }
    if !report.skipped.is_empty() {
        log::warn!("skipped {} unreadable file(s)", report.skipped.len());
    }
    if ds.is_empty() {
        return Err(Error::Ingest("no valid images found".into()));
    }
    Ok((ds, report))
}

/// Load `root/<class>/*.{ppm,png}`; classes are the sorted subdirectory
/// names and samples follow sorted path order.
pub fn load_directory(root: &Path, size: usize) -> Result<(LabeledDataset, LoadReport)> {
    let classes: Vec<PathBuf> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if classes.is_empty() {
        return Err(Error::Ingest(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let names: Vec<String> = classes
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let mut entries = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        for f in read_dir_sorted(dir)? {
            if f.is_file() && ImageFormat::from_path(&f).is_some() {
                entries.push((f, label));
            }
        }
    }
    ingest(entries, names, size)
}

/// Load from a `path,class` CSV. Relative paths resolve against the
/// manifest's directory; classes are the sorted distinct names.
pub fn load_manifest(manifest: &Path, size: usize) -> Result<(LabeledDataset, LoadReport)> {
    let text = std::fs::read_to_string(manifest).map_err(|source| Error::Path {
        path: manifest.to_path_buf(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "path,class") {
            continue;
        }
        let (p, c) = line.rsplit_once(',').ok_or_else(|| {
            Error::Ingest(format!("manifest line {}: expected `path,class`", n + 1))
        })?;
        rows.push((base.join(p.trim()), c.trim().to_string()));
    }
    let names: Vec<String> = rows
        .iter()
        .map(|r| r.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let entries = rows
        .into_iter()
        .map(|(p, c)| {
            let label = names.binary_search(&c).expect("collected above");
            (p, label)
        })
        .collect();
    ingest(entries, names, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_ppm;

    fn write_img(path: &Path, v: f32) {
        std::fs::write(path, encode_ppm(&Tensor::full(&[3, 4, 4], v)).unwrap()).unwrap();
    }

    #[test]
    fn directory_with_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["normal", "fire", "flood", "traffic", "collapsed_building"] {
            std::fs::create_dir(dir.path().join(c)).unwrap();
        }
        for i in 0..3 {
            write_img(
                &dir.path().join("fire").join(format!("{i}.ppm")),
                10.0 * i as f32,
            );
        }
        std::fs::write(dir.path().join("fire/bad.ppm"), b"P6\n4 4\n255\n\x01").unwrap();
        std::fs::write(dir.path().join("fire/notes.txt"), b"ignored").unwrap();
        write_img(&dir.path().join("normal/a.ppm"), 200.0);
        let (ds, report) = load_directory(dir.path(), 8).unwrap();
        assert_eq!(
            ds.class_names,
            ["collapsed_building", "fire", "flood", "normal", "traffic"]
        );
        assert_eq!(ds.len(), 4);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(ds.labels, vec![1, 1, 1, 3]);
        let (again, _) = load_directory(dir.path(), 8).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn manifest_route() {
        let dir = tempfile::tempdir().unwrap();
        write_img(&dir.path().join("x.ppm"), 0.0);
        write_img(&dir.path().join("y.ppm"), 255.0);
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "path,class\nx.ppm,b\ny.ppm,a\n").unwrap();
        let (ds, _) = load_manifest(&m, 4).unwrap();
        assert_eq!(ds.class_names, ["a", "b"]);
        assert_eq!(ds.labels, vec![1, 0]);
        assert!(load_directory(&dir.path().join("missing"), 4).is_err());
    }
}
