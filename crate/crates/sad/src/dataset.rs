//! Line-delimited scene datasets: a header object followed by one scene
//! record per line.

use crate::error::{Error, Result};
use crate::scene::Scene;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub count: usize,
}

impl DatasetHeader {
    pub fn new(config_hash: &str, count: usize) -> Self {
        DatasetHeader {
            format: "sad-scenes".into(),
            version: 1,
            config_hash: config_hash.into(),
            count,
        }
    }
}

pub fn write_dataset(path: &Path, scenes: &[Scene], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = DatasetHeader::new(config_hash, scenes.len());
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(|e| Error::format(format!("header: {e}")))?
    )?;
    for scene in scenes {
        writeln!(
            out,
            "{}",
            serde_json::to_string(scene)
                .map_err(|e| Error::format(format!("scene {}: {e}", scene.scene_id)))?
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut lines = file.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(format!("{} is empty", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(format!("{} header: {e}", path.display())))?;
    if header.format != "sad-scenes" || header.version != 1 {
        return Err(Error::format(format!(
            "{} is not a v1 scene dataset",
            path.display()
        )));
    }
    let mut scenes = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        scene.validate()?;
        scenes.push(scene);
    }
    if scenes.len() != header.count {
        return Err(Error::format(format!(
            "{} declares {} scenes but contains {}",
            path.display(),
            header.count,
            scenes.len()
        )));
    }
    Ok((header, scenes))
}
