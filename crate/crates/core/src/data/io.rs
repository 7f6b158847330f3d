//! Dataset files: a JSON manifest next to a little-endian binary payload.
//!
//! ```text
//! magic "PABDSET\0" | version u32 | k u32 | n u32 |
//! counts (train, validation, test, unassigned) u32*4 |
//! image dims u32*3 | genetic dims u32*3 | min_per_class u32 |
//! class names (u32 len + utf8)*k |
//! ids u64*n | labels u32*n | split codes u8*n | genetic-present u8*n |
//! image payload f32*(n*Di*Hi*Wi) | genetic payload f32*(present*Dg*Hg*Wg)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, EmbeddingMap, Modality, Sample, SplitCounts, SplitTag};
use crate::container::{check_magic, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 8] = *b"PABDSET\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: DatasetManifest,
    payload: String,
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let m = &ds.manifest;
    let mut w = ByteWriter::new();
    w.bytes(&DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(m.k as u32);
    w.u32(ds.samples.len() as u32);
    for c in [m.counts.train, m.counts.validation, m.counts.test, m.counts.unassigned] {
        w.u32(c as u32);
    }
    for d in m.image_dims.iter().chain(&m.genetic_dims) {
        w.u32(*d as u32);
    }
    w.u32(m.min_per_class as u32);
    for name in &m.class_names {
        w.str(name);
    }
    for s in &ds.samples {
        w.u64(s.id);
    }
    for s in &ds.samples {
        w.u32(s.label as u32);
    }
    for s in &ds.samples {
        w.u8(s.split.code());
    }
    for s in &ds.samples {
        w.u8(s.genetic.is_some() as u8);
    }
    for s in &ds.samples {
        w.f32s(&s.image.data);
    }
    for s in &ds.samples {
        if let Some(g) = &s.genetic {
            w.f32s(&g.data);
        }
    }
    w.buf
}

fn read_u32s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<usize>> {
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    check_magic(&mut r, DATASET_MAGIC, path)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let c = read_u32s(&mut r, 4)?;
    let counts = SplitCounts {
        train: c[0],
        validation: c[1],
        test: c[2],
        unassigned: c[3],
    };
    let dims = read_u32s(&mut r, 6)?;
    let image_dims = [dims[0], dims[1], dims[2]];
    let genetic_dims = [dims[3], dims[4], dims[5]];
    let min_per_class = r.u32()? as usize;
    let class_names = (0..k).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let labels = read_u32s(&mut r, n)?;
    let splits = r.take(n)?.to_vec();
    let present = r.take(n)?.to_vec();

    let img_len: usize = image_dims.iter().product();
    let gen_len: usize = genetic_dims.iter().product();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        if labels[i] >= k {
            return Err(Error::LabelOutOfRange { label: labels[i], k });
        }
        let split = SplitTag::from_code(splits[i])
            .ok_or_else(|| Error::InvalidArgument(format!("bad split code {}", splits[i])))?;
        let image = EmbeddingMap::new(
            Modality::Image,
            image_dims[0],
            image_dims[1],
            image_dims[2],
            r.f32s(img_len)?,
        )?;
        samples.push(Sample {
            id: ids[i],
            label: labels[i],
            split,
            image,
            genetic: None,
        });
    }
    for (s, &p) in samples.iter_mut().zip(&present) {
        if p != 0 {
            s.genetic = Some(EmbeddingMap::new(
                Modality::Genetic,
                genetic_dims[0],
                genetic_dims[1],
                genetic_dims[2],
                r.f32s(gen_len)?,
            )?);
        }
    }
    if r.remaining() != 0 {
        return Err(Error::DimensionMismatch {
            what: "dataset payload length".into(),
            expected: r.position().to_string(),
            found: bytes.len().to_string(),
        });
    }
    let ds = Dataset {
        manifest: DatasetManifest {
            format_version: version,
            k,
            class_names,
            n_samples: n,
            counts,
            image_dims,
            genetic_dims,
            min_per_class,
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `<manifest>.json` and its `.bin` payload next to it.
pub fn save_dataset(ds: &Dataset, manifest_path: &Path) -> Result<()> {
    ds.validate()?;
    let payload = payload_path(manifest_path);
    write_file(&payload, &encode_dataset(ds))?;
    let file = ManifestFile {
        manifest: ds.manifest.clone(),
        payload: payload
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_file(manifest_path, serde_json::to_string_pretty(&file)?.as_bytes())
}

/// Reads a manifest and its payload, checking that the two agree.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text)?;
    let payload = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.payload);
    let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let ds = decode_dataset(&bytes, &payload)?;
    let (a, b) = (&file.manifest, &ds.manifest);
    let checks = [
        ("class count", a.k.to_string(), b.k.to_string()),
        ("sample count", a.n_samples.to_string(), b.n_samples.to_string()),
        ("image dims", format!("{:?}", a.image_dims), format!("{:?}", b.image_dims)),
        ("genetic dims", format!("{:?}", a.genetic_dims), format!("{:?}", b.genetic_dims)),
        ("split counts", format!("{:?}", a.counts), format!("{:?}", b.counts)),
        ("format version", a.format_version.to_string(), b.format_version.to_string()),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            return Err(Error::DimensionMismatch {
                what: format!("{what} (manifest vs payload)"),
                expected,
                found,
            });
        }
    }
    Ok(ds)
}

/// `id,label,class_name,split` rows.
pub fn export_labels_csv(ds: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "id,label,class_name,split")?;
    for s in &ds.samples {
        writeln!(
            out,
            "{},{},{},{}",
            s.id,
            s.label,
            ds.manifest.class_names[s.label],
            s.split.as_str()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            k: 3,
            n_per_class: 4,
            confusable_pairs: vec![(0, 1)],
            ..SynthConfig::default()
        };
        let mut ds = synth_generate(&cfg, 3).unwrap();
        ds.samples[1].genetic = None;
        ds.samples[2].split = SplitTag::Test;
        ds.refresh_counts();
        ds
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = small();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), std::fs::read(path.with_extension("bin")).unwrap());
    }

    #[test]
    fn label_out_of_range_has_its_own_error() {
        let mut ds = small();
        let bytes = {
            ds.samples[0].label = 2;
            let mut b = encode_dataset(&ds);
            // labels start after header, names, and ids; patch the first one to k
            let k = ds.k() as u32;
            let names: usize = ds.manifest.class_names.iter().map(|n| 4 + n.len()).sum();
            let off = 8 + 4 * 3 + 16 + 24 + 4 + names + 8 * ds.len();
            b[off..off + 4].copy_from_slice(&k.to_le_bytes());
            b
        };
        let err = decode_dataset(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, k: 3 }));
    }

    #[test]
    fn large_k_label_bound() {
        // the motivating class count: a label equal to k is rejected
        let mut ds = small();
        ds.manifest.k = 516;
        ds.manifest.class_names = (0..516).map(|i| format!("sp{i}")).collect();
        ds.samples[0].label = 516;
        let err = decode_dataset(&encode_dataset(&ds), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 516, k: 516 }));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let b = encode_dataset(&small());
        let err = decode_dataset(&b[..b.len() - 10], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut b = encode_dataset(&small());
        b[3] = b'?';
        assert!(matches!(
            decode_dataset(&b, Path::new("x")).unwrap_err(),
            Error::BadMagic { .. }
        ));
    }

    #[test]
    fn manifest_payload_disagreement_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["image_dims"] = serde_json::json!([7, 2, 2]);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn csv_export_has_one_row_per_sample() {
        let ds = small();
        let mut out = Vec::new();
        export_labels_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), ds.len() + 1);
        assert!(text.lines().nth(3).unwrap().ends_with(",test"));
    }
}
