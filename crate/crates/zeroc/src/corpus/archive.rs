//! On-disk dataset archives: a JSON manifest, a line-delimited record
//! metadata file, and raw tensor blobs.
//!
//! Blob layout: magic `ZCTB`, format version (u32 LE), dtype code (u8,
//! 0 = u8), rank (u8), then each dimension as u32 LE, then the payload in
//! row-major order. Grids are stored as one `(count, H, W)` u8 blob of
//! color ids; masks as one `(total_masks, H, W)` u8 0/1 blob, with each
//! record's `mask_start`/`mask_count` recorded in the metadata line.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Result, ZcError};

use super::{ExampleRecord, Grid, ObjectSpec};

const MAGIC: &[u8; 4] = b"ZCTB";
const BLOB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub domain: u8,
    pub canvas: (usize, usize),
    pub count: usize,
    /// Indices into the record list; together they partition it 10:1.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub vocabulary: Vec<String>,
    pub seed: u64,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn new(
        name: &str,
        domain: u8,
        canvas: (usize, usize),
        count: usize,
        vocabulary: Vec<String>,
        seed: u64,
    ) -> Self {
        // Every 11th record goes to validation: a deterministic 10:1 split.
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for i in 0..count {
            if i % 11 == 10 {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        DatasetManifest {
            name: name.into(),
            domain,
            canvas,
            count,
            train_indices: train,
            val_indices: val,
            vocabulary,
            seed,
            format_version: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .train_indices
            .iter()
            .chain(self.val_indices.iter())
            .copied()
            .collect();
        all.sort_unstable();
        if all != (0..self.count).collect::<Vec<_>>() {
            return Err(ZcError::Contract(
                "split indices do not partition the records".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    label: String,
    domain: u8,
    seed: u64,
    mask_start: usize,
    mask_count: usize,
    objects: Vec<ObjectSpec>,
}

fn write_blob(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(ZcError::Codec(format!(
            "blob payload {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&BLOB_VERSION.to_le_bytes())?;
    f.write_all(&[0u8, dims.len() as u8])?;
    for &d in dims {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    f.write_all(data)?;
    Ok(())
}

fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 10];
    f.read_exact(&mut head)?;
    if &head[0..4] != MAGIC {
        return Err(ZcError::Codec("bad blob magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(ZcError::Codec(format!("unsupported blob version {version}")));
    }
    if head[8] != 0 {
        return Err(ZcError::Codec(format!("unsupported dtype code {}", head[8])));
    }
    let rank = head[9] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    let expect: usize = dims.iter().product();
    if data.len() != expect {
        return Err(ZcError::Codec(format!(
            "blob payload {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    Ok((dims, data))
}

pub fn write_archive(dir: &Path, manifest: &DatasetManifest, records: &[ExampleRecord]) -> Result<()> {
    manifest.validate()?;
    if records.len() != manifest.count {
        return Err(ZcError::Contract("record count differs from manifest".into()));
    }
    std::fs::create_dir_all(dir)?;
    let (h, w) = manifest.canvas;

    let mut grids = Vec::with_capacity(records.len() * h * w);
    let mut masks: Vec<u8> = Vec::new();
    let mut metas = String::new();
    let mut mask_cursor = 0usize;
    for rec in records {
        if rec.grid.height != h || rec.grid.width != w {
            return Err(ZcError::Contract("record canvas differs from manifest".into()));
        }
        grids.extend_from_slice(rec.grid.cells());
        for m in &rec.masks {
            let mut plane = vec![0u8; h * w];
            for &(r, c) in m {
                plane[r * w + c] = 1;
            }
            masks.extend_from_slice(&plane);
        }
        let meta = RecordMeta {
            label: rec.label.clone(),
            domain: rec.domain,
            seed: rec.seed,
            mask_start: mask_cursor,
            mask_count: rec.masks.len(),
            objects: rec.objects.clone(),
        };
        mask_cursor += rec.masks.len();
        metas.push_str(&serde_json::to_string(&meta)?);
        metas.push('\n');
    }

    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    std::fs::write(dir.join("records.jsonl"), metas)?;
    write_blob(&dir.join("grids.blob"), &[records.len(), h, w], &grids)?;
    write_blob(&dir.join("masks.blob"), &[mask_cursor, h, w], &masks)?;
    Ok(())
}

pub fn read_archive(dir: &Path) -> Result<(DatasetManifest, Vec<ExampleRecord>)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.validate()?;
    let (h, w) = manifest.canvas;
    let (gdims, gdata) = read_blob(&dir.join("grids.blob"))?;
    let (mdims, mdata) = read_blob(&dir.join("masks.blob"))?;
    if gdims != [manifest.count, h, w] {
        return Err(ZcError::Codec("grid blob dims mismatch".into()));
    }
    if mdims.len() != 3 || mdims[1] != h || mdims[2] != w {
        return Err(ZcError::Codec("mask blob dims mismatch".into()));
    }
    let mut records = Vec::with_capacity(manifest.count);
    let metas = std::fs::read_to_string(dir.join("records.jsonl"))?;
    for (i, line) in metas.lines().enumerate() {
        let meta: RecordMeta = serde_json::from_str(line)?;
        let mut grid = Grid::new(h, w)?;
        for r in 0..h {
            for c in 0..w {
                grid.set(r, c, gdata[i * h * w + r * w + c])?;
            }
        }
        let mut rec_masks = Vec::with_capacity(meta.mask_count);
        for k in 0..meta.mask_count {
            let base = (meta.mask_start + k) * h * w;
            if base + h * w > mdata.len() {
                return Err(ZcError::Codec("mask blob truncated".into()));
            }
            let mut set = BTreeSet::new();
            for r in 0..h {
                for c in 0..w {
                    if mdata[base + r * w + c] != 0 {
                        set.insert((r, c));
                    }
                }
            }
            rec_masks.push(set);
        }
        records.push(ExampleRecord {
            grid,
            masks: rec_masks,
            label: meta.label,
            domain: meta.domain,
            seed: meta.seed,
            objects: meta.objects,
        });
    }
    if records.len() != manifest.count {
        return Err(ZcError::Codec("record line count differs from manifest".into()));
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::super::generate::{generate_relation_dataset, RelationDatasetConfig};
    use super::*;

    #[test]
    fn archive_round_trips_and_is_byte_identical() {
        let cfg = RelationDatasetConfig::hd_letter(23, 1);
        let (manifest, records) = generate_relation_dataset(&cfg, 99).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_archive(d1.path(), &manifest, &records).unwrap();
        write_archive(d2.path(), &manifest, &records).unwrap();
        for name in ["manifest.json", "records.jsonl", "grids.blob", "masks.blob"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} not byte-identical");
        }
        let (m2, r2) = read_archive(d1.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(r2, records);
    }

    #[test]
    fn split_is_ten_to_one_and_partitions() {
        let m = DatasetManifest::new("t", 1, (16, 16), 110, vec![], 0);
        m.validate().unwrap();
        assert_eq!(m.val_indices.len(), 10);
        assert_eq!(m.train_indices.len(), 100);
    }

    #[test]
    fn corrupt_blob_is_a_codec_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grids.blob");
        write_blob(&path, &[2, 2], &[1, 2, 3, 4]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_blob(&path), Err(ZcError::Codec(_))));
    }
}
