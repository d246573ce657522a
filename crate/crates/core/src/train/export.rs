use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;

use crate::error::Result;
use crate::model::PftModel;
use crate::segmap::{write_normalized_pgm, LabelMap};
use crate::tensor::{chw, Tensor};

/// Writes every attention map of one image as
/// `layer{l}/scale{s}/cat{k}.f64` with a `.json` sidecar and a min-max
/// normalised `.pgm` preview. Returns the number of maps written.
pub fn export_attention(model: &PftModel, image: &Tensor, dir: &Path) -> Result<usize> {
    let maps = model.attention_maps(image)?;
    let mut written = 0;
    for (l, layer) in maps.iter().enumerate() {
        for (j, map) in layer.iter().enumerate() {
            let scale = model.config.scales[j];
            let [k, h, w] = chw(map.shape(), "export_attention")?;
            let sub = dir.join(format!("layer{l}")).join(format!("scale{scale}"));
            fs::create_dir_all(&sub)?;
            for c in 0..k {
                let values = &map.data()[c * h * w..(c + 1) * h * w];
                let stem = sub.join(format!("cat{c}"));
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                fs::write(stem.with_extension("f64"), bytes)?;
                fs::write(
                    stem.with_extension("json"),
                    serde_json::to_vec_pretty(&json!({
                        "layer": l,
                        "scale": scale,
                        "category": c,
                        "height": h,
                        "width": w,
                        "dtype": "f64le",
                    }))?,
                )?;
                write_normalized_pgm(BufWriter::new(fs::File::create(stem.with_extension("pgm"))?), values, h, w)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Writes a label map as `{stem}.pgm` plus a `{stem}.json` sidecar.
pub fn export_segmentation(labels: &LabelMap, classes: usize, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    labels.write_pgm(BufWriter::new(fs::File::create(stem.with_extension("pgm"))?))?;
    fs::write(
        stem.with_extension("json"),
        serde_json::to_vec_pretty(&json!({
            "height": labels.height,
            "width": labels.width,
            "classes": classes,
        }))?,
    )?;
    Ok(())
}
