//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus one binary file per split.
//! Each record is one label byte followed by `C·H·W` pixel bytes in
//! channel-major order, the same layout as the CIFAR-10 binary release:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train.bin
//! <dir>/eval.bin
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simdis_core::data::{generate_shapes, DatasetSpec, ImageDataset, Split, SHAPE_CLASSES};

use crate::error::{io_err, LabError, Result};

pub const MANIFEST: &str = "manifest.json";
const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub train: SplitFile,
    pub eval: SplitFile,
}

fn missing(dir: &Path) -> LabError {
    LabError::MissingData {
        path: dir.to_path_buf(),
        hint: format!(
            "create it with `simdis fetch-data --out {}` (synthetic shapes) or \
             `simdis fetch-data --source cifar10 --from <cifar-10-batches-bin> --out {}`",
            dir.display(),
            dir.display()
        ),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(missing(dir));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path,
        msg: e.to_string(),
    })
}

fn decode_records(bytes: &[u8], spec: DatasetSpec, path: &Path) -> Result<ImageDataset> {
    let img = spec.channels * spec.height * spec.width;
    let rec = 1 + img;
    if bytes.len() % rec != 0 {
        return Err(LabError::Parse {
            path: path.to_path_buf(),
            msg: format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * img);
    for r in bytes.chunks_exact(rec) {
        labels.push(u32::from(r[0]));
        pixels.extend(r[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(ImageDataset::new(spec, pixels, labels)?)
}

pub fn load_split(dir: &Path, split: Split) -> Result<ImageDataset> {
    let m = read_manifest(dir)?;
    let file = match split {
        Split::Train => &m.train,
        Split::Eval => &m.eval,
    };
    let path = dir.join(&file.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let spec = DatasetSpec {
        name: m.name.clone(),
        split,
        channels: m.channels,
        height: m.height,
        width: m.width,
        num_classes: m.classes.len(),
    };
    let data = decode_records(&bytes, spec, &path)?;
    if data.len() != file.count {
        return Err(LabError::Parse {
            path,
            msg: format!("manifest lists {} records, file holds {}", file.count, data.len()),
        });
    }
    Ok(data)
}

fn encode_records(data: &ImageDataset, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for i in 0..data.len() {
        let label = u8::try_from(data.labels[i]).map_err(|_| LabError::Run("labels above 255 cannot be stored".into()))?;
        let mut rec = Vec::with_capacity(1 + data.image_len());
        rec.push(label);
        rec.extend(data.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        w.write_all(&rec).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes both splits and the manifest. Pixels are quantized to 8 bits.
pub fn write_dataset(dir: &Path, classes: &[String], train: &ImageDataset, eval: &ImageDataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    encode_records(train, &dir.join("train.bin"))?;
    encode_records(eval, &dir.join("eval.bin"))?;
    let m = Manifest {
        name: train.spec.name.clone(),
        channels: train.spec.channels,
        height: train.spec.height,
        width: train.spec.width,
        classes: classes.to_vec(),
        train: SplitFile {
            file: "train.bin".into(),
            count: train.len(),
        },
        eval: SplitFile {
            file: "eval.bin".into(),
            count: eval.len(),
        },
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m).map_err(|e| LabError::Run(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapesRequest {
    pub train: usize,
    pub eval: usize,
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ShapesRequest {
    fn default() -> Self {
        Self {
            train: 2048,
            eval: 1000,
            size: 16,
            channels: 3,
            classes: 10,
            seed: 0,
        }
    }
}

/// Renders the procedural shapes corpus into `dir`.
pub fn fetch_shapes(dir: &Path, req: ShapesRequest) -> Result<Manifest> {
    let train = generate_shapes(req.train, req.size, req.channels, req.classes, req.seed, Split::Train)?;
    let eval = generate_shapes(req.eval, req.size, req.channels, req.classes, req.seed, Split::Eval)?;
    let classes: Vec<String> = SHAPE_CLASSES[..req.classes].iter().map(|s| s.to_string()).collect();
    write_dataset(dir, &classes, &train, &eval)
}

/// Converts a local copy of the CIFAR-10 binary release
/// (`data_batch_{1..5}.bin`, `test_batch.bin`) into the layout above.
pub fn import_cifar10(src: &Path, dir: &Path) -> Result<Manifest> {
    let spec = |split| DatasetSpec {
        name: "cifar10".into(),
        split,
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
    };
    let read = |names: &[String]| -> Result<Vec<u8>> {
        let mut all = Vec::new();
        for n in names {
            let p: PathBuf = src.join(n);
            if !p.exists() {
                return Err(LabError::MissingData {
                    path: p,
                    hint: "expected the CIFAR-10 binary release (cifar-10-batches-bin)".into(),
                });
            }
            all.extend(fs::read(&p).map_err(io_err(&p))?);
        }
        Ok(all)
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = decode_records(&read(&train_files)?, spec(Split::Train), src)?;
    let eval = decode_records(&read(&["test_batch.bin".to_string()])?, spec(Split::Eval), src)?;
    let classes: Vec<String> = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    write_dataset(dir, &classes, &train, &eval)
}
