use std::path::{Path, PathBuf};

use super::SpatialMap;
use crate::bench::write_pnm;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedFiles {
    pub map: PathBuf,
    pub overlay: Option<PathBuf>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Black-red-yellow-white ramp.
fn heat(v: f64) -> [f64; 3] {
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Writes `<dir>/<sample_id>_<kind>.pgm` and, when an underlay image
/// (`[C, H, W]` in `[0, 1]`, C = 1 or 3) is given, a `.ppm` overlay that
/// blends the heat-colored map over it at 50%.
pub fn render_map(map: &SpatialMap, underlay: Option<&[f64]>, dir: &Path) -> Result<RenderedFiles> {
    let stem = format!("{}_{}", map.sample_id, map.kind);
    let hw = map.height * map.width;
    let gray: Vec<u8> = map.values.iter().map(|&v| to_byte(v)).collect();
    let map_path = dir.join(format!("{stem}.pgm"));
    write_pnm(&map_path, &gray, map.width, map.height, false)?;
    let overlay = match underlay {
        None => None,
        Some(img) => {
            let channels = img.len() / hw.max(1);
            if !(channels == 1 || channels == 3) || img.len() != channels * hw {
                return Err(Error::shape(
                    "render_map",
                    format!("underlay of {} values for a {}x{} map", img.len(), map.height, map.width),
                ));
            }
            let mut rgb = Vec::with_capacity(3 * hw);
            for (p, &v) in map.values.iter().enumerate() {
                let h = heat(v);
                for (c, hc) in h.iter().enumerate() {
                    let base = img[(c % channels) * hw + p];
                    rgb.push(to_byte(0.5 * base + 0.5 * hc));
                }
            }
            let path = dir.join(format!("{stem}.ppm"));
            write_pnm(&path, &rgb, map.width, map.height, true)?;
            Some(path)
        }
    };
    Ok(RenderedFiles { map: map_path, overlay })
}
