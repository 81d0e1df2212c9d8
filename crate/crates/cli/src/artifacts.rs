//! Reading and writing the files that commands exchange.

use crate::error::{io_err, CliError, Result};
use rq_core::stage1::Stage1Model;
use rq_core::{Codebook, CodebookStack, Image, PatchCodec, PerDepthCodebooks, Quantizer};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CODEC_FILE: &str = "codec.rqpc";
pub const MANIFEST_FILE: &str = "stage1.json";
pub const MODEL_FILE: &str = "model.rqtm";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    write_file(path, (text + "\n").as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out += &serde_json::to_string(r).expect("serializable row");
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// `.ppm` files of a directory in file-name order.
pub fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Config(format!("no input images: {} does not exist", dir.display())),
        _ => CliError::Io {
            path: dir.into(),
            source: e,
        },
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no input images in {}", dir.display())));
    }
    Ok(paths)
}

pub fn load_images(dir: &Path) -> Result<Vec<Image>> {
    image_paths(dir)?
        .iter()
        .map(|p| Image::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .collect()
}

/// Summary of a stage-1 run, stored next to its codec and codebooks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub factor: usize,
    pub n_z: usize,
    pub codebook_size: usize,
    pub depth: usize,
    pub per_depth_codebooks: bool,
    pub codebook_hash: String,
}

fn codebook_files(q: &Quantizer) -> Vec<String> {
    match q {
        Quantizer::Shared(_) => vec!["codebook.rqcb".into()],
        Quantizer::PerDepth(p) => (0..p.books().len()).map(|d| format!("codebook.d{d}.rqcb")).collect(),
    }
}

pub fn save_stage1(dir: &Path, model: &Stage1Model) -> Result<()> {
    write_file(&dir.join(CODEC_FILE), &model.codec.to_bytes())?;
    for (name, cb) in codebook_files(&model.quantizer).iter().zip(model.quantizer.codebooks()) {
        write_file(&dir.join(name), &cb.to_bytes())?;
    }
    let manifest = Manifest {
        factor: model.codec.factor(),
        n_z: model.codec.n_z(),
        codebook_size: model.quantizer.codes_per_depth(),
        depth: model.depth,
        per_depth_codebooks: !model.quantizer.is_shared(),
        codebook_hash: hex(&model.quantizer.stack_hash()),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Loads a stage-1 directory and checks that its parts belong together.
pub fn load_stage1(dir: &Path) -> Result<Stage1Model> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(io_err(dir.join(MANIFEST_FILE)))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("bad stage-1 manifest: {e}")))?;
    let codec = PatchCodec::from_bytes(&read_file(&dir.join(CODEC_FILE))?)
        .map_err(|e| CliError::Mismatch(format!("{}: {e}", dir.join(CODEC_FILE).display())))?;
    let read_book = |name: &str| {
        Codebook::from_bytes(&read_file(&dir.join(name))?)
            .map_err(|e| CliError::Mismatch(format!("{}: {e}", dir.join(name).display())))
    };
    let quantizer = if manifest.per_depth_codebooks {
        let books = (0..manifest.depth)
            .map(|d| read_book(&format!("codebook.d{d}.rqcb")))
            .collect::<Result<Vec<_>>>()?;
        Quantizer::PerDepth(PerDepthCodebooks::new(books)?)
    } else {
        Quantizer::Shared(read_book("codebook.rqcb")?)
    };
    if hex(&quantizer.stack_hash()) != manifest.codebook_hash {
        return Err(CliError::Mismatch(
            "codebook/codec mismatch: codebook hash differs from the manifest".into(),
        ));
    }
    if quantizer.dim() != codec.n_z() || manifest.n_z != codec.n_z() || manifest.factor != codec.factor() {
        return Err(CliError::Mismatch(format!(
            "codebook/codec mismatch: codebook n_z={}, codec n_z={}",
            quantizer.dim(),
            codec.n_z()
        )));
    }
    Ok(Stage1Model {
        codec,
        quantizer,
        depth: manifest.depth,
    })
}
