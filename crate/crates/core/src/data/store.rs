use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Corruption, Dataset, Occlusion, SampleRecord, Split, SplitSet};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
const HEADER: [&str; 10] = [
    "entry_name", "identity", "camera", "split", "offset", "scale", "occ_x", "occ_y", "occ_w", "occ_h",
];

fn split_file(split: Split) -> String {
    format!("{split}.pyrt")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(format!("manifest: {e}"))
}

/// Writes `train.pyrt`, `query.pyrt`, `gallery.pyrt` and the manifest into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE)).map_err(csv_err)?;
    manifest.write_record(HEADER).map_err(csv_err)?;
    for split in Split::ALL {
        let set = dataset.split(split);
        let mut c = Container::new();
        for (i, r) in set.records.iter().enumerate() {
            c.insert(r.entry_name.clone(), set.images.index_outer(i)?)?;
            let occ = r.corruption.occlusion.map_or([String::new(), String::new(), String::new(), String::new()], |o| {
                [o.x, o.y, o.w, o.h].map(|v| v.to_string())
            });
            let mut row = vec![
                r.entry_name.clone(),
                r.identity.to_string(),
                r.camera.to_string(),
                split.to_string(),
                r.corruption.offset.to_string(),
                r.corruption.scale.to_string(),
            ];
            row.extend(occ);
            manifest.write_record(&row).map_err(csv_err)?;
        }
        c.write(dir.join(split_file(split)))?;
    }
    manifest.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Dataset(format!("manifest line {line}: bad `{}` field", HEADER[i])))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Dataset(format!("no {MANIFEST_FILE} in {}", dir.display())));
    }
    let mut reader = csv::Reader::from_path(&path).map_err(csv_err)?;
    if reader.headers().map_err(csv_err)?.iter().ne(HEADER) {
        return Err(Error::Dataset(format!("{MANIFEST_FILE} has unexpected columns")));
    }
    let mut records: BTreeMap<Split, Vec<SampleRecord>> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i as u64 + 2;
        let occlusion = if row.get(6).is_some_and(|v| !v.is_empty()) {
            Some(Occlusion {
                x: field(&row, 6, line)?,
                y: field(&row, 7, line)?,
                w: field(&row, 8, line)?,
                h: field(&row, 9, line)?,
                color: [0.0; 3],
            })
        } else {
            None
        };
        let split: Split = field::<String>(&row, 3, line)?.parse()?;
        records.entry(split).or_default().push(SampleRecord {
            entry_name: field(&row, 0, line)?,
            identity: field(&row, 1, line)?,
            camera: field(&row, 2, line)?,
            split,
            corruption: Corruption {
                offset: field(&row, 4, line)?,
                scale: field(&row, 5, line)?,
                occlusion,
            },
        });
    }
    let mut sets = Vec::with_capacity(3);
    for split in Split::ALL {
        let recs = records.remove(&split).unwrap_or_default();
        if recs.is_empty() {
            return Err(Error::Dataset(format!("split `{split}` is empty")));
        }
        let container = Container::read(dir.join(split_file(split)))?;
        let images = recs
            .iter()
            .map(|r| container.tensor::<f32>(&r.entry_name))
            .collect::<Result<Vec<_>>>()?;
        let images = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
        if images.rank() != 4 {
            return Err(Error::Dataset(format!("split `{split}` images have shape {:?}", images.shape())));
        }
        sets.push(SplitSet { records: recs, images });
    }
    let gallery = sets.pop().expect("three splits");
    let query = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    if train.images.shape()[1..] != query.images.shape()[1..] || query.images.shape()[1..] != gallery.images.shape()[1..] {
        return Err(Error::Dataset("splits disagree on image shape".into()));
    }
    Ok(Dataset { train, query, gallery })
}
