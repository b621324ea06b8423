//! Human-viewable renderings of maps and analysis outputs: PNG heatmaps and
//! grayscale images, plus CSV builders for embeddings and interpolation
//! traces. PNGs are for inspection only — the tensor binaries written
//! alongside them remain the authoritative outputs.

use crate::attribution::{EmbeddingPoint, InterpolationStep};
use crate::error::{Error, Result};
use image::{GrayImage, ImageFormat, RgbImage};
use ndarray::Array2;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Cool pole of the diverging palette (most negative value).
pub const HEATMAP_COOL: [u8; 3] = [59, 76, 192];
/// Warm pole of the diverging palette (most positive value).
pub const HEATMAP_WARM: [u8; 3] = [180, 4, 38];
pub const HEATMAP_COLORMAP: &str = "diverging-blue-white-red";

/// Display scale of a written heatmap; also serialized to the sidecar JSON.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct HeatmapScale {
    pub vmin: f64,
    pub vmax: f64,
    pub colormap: &'static str,
}

/// Diverging color for `t ∈ [−1, 1]`: blue at −1, white at 0, red at +1,
/// linear in RGB on each half.
pub fn diverging_rgb(t: f32) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(-1.0, 1.0) };
    let (pole, s) = if t < 0.0 { (HEATMAP_COOL, -t) } else { (HEATMAP_WARM, t) };
    let mut rgb = [0u8; 3];
    for (out, &p) in rgb.iter_mut().zip(pole.iter()) {
        *out = (255.0 + s * (f32::from(p) - 255.0)).round() as u8;
    }
    rgb
}

fn expect_renderable(map: &Array2<f32>, what: &str) -> Result<()> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::Contract(format!("cannot render an empty {what} ({h}×{w})")));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

/// Render a signed map with the symmetric diverging palette (zero is always
/// white; `vmax = max|value|`) and write it as a PNG, plus a `<path>.json`
/// sidecar recording the scale. An all-zero map renders flat white.
pub fn heatmap_png(map: &Array2<f32>, path: &Path) -> Result<HeatmapScale> {
    expect_renderable(map, "heatmap")?;
    let vmax = map.iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
    let (h, w) = map.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let t = if vmax == 0.0 { 0.0 } else { v / vmax };
        image::Rgb(diverging_rgb(t))
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let scale = HeatmapScale {
        vmin: -f64::from(vmax),
        vmax: f64::from(vmax),
        colormap: HEATMAP_COLORMAP,
    };
    let sidecar = path.with_file_name(format!(
        "{}.json",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(sidecar, serde_json::to_string(&scale)?)?;
    Ok(scale)
}

/// Write an intensity image as an 8-bit grayscale PNG, clamping to `[0, 1]`.
pub fn grayscale_png(image: &Array2<f32>, path: &Path) -> Result<()> {
    expect_renderable(image, "image")?;
    let (h, w) = image.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// CSV of embedding points: `id,x,y,phenotype,class`.
pub fn embedding_csv(points: &[EmbeddingPoint]) -> String {
    let mut out = String::from("id,x,y,phenotype,class\n");
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.id, p.x, p.y, p.phenotype, p.class_label)
            .expect("string write");
    }
    out
}

/// CSV of per-step interpolation predictions:
/// `step,alpha,class_logit,regression`.
pub fn interpolation_csv(steps: &[InterpolationStep]) -> String {
    let mut out = String::from("step,alpha,class_logit,regression\n");
    for (k, s) in steps.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            k, s.alpha, s.prediction.class_logit, s.prediction.regression_value
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Prediction;
    use ndarray::arr2;

    #[test]
    fn heatmap_hits_the_palette_poles_and_midpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let map = arr2(&[[-2.0f32, 0.0], [1.0, 2.0]]);
        let scale = heatmap_png(&map, &path).unwrap();
        assert_eq!(scale.vmax, 2.0);
        assert_eq!(scale.vmin, -2.0);

        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, HEATMAP_COOL);
        assert_eq!(img.get_pixel(1, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 1).0, HEATMAP_WARM);
        // value 1.0 of vmax 2.0: halfway from white to the warm pole
        assert_eq!(img.get_pixel(0, 1).0, diverging_rgb(0.5));
        assert_eq!(diverging_rgb(0.5), [218, 130, 147]);

        let sidecar = std::fs::read_to_string(dir.path().join("m.png.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(parsed["vmax"], 2.0);
        assert_eq!(parsed["colormap"], HEATMAP_COLORMAP);
    }

    #[test]
    fn zero_heatmap_renders_flat_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.png");
        let scale = heatmap_png(&Array2::zeros((3, 5)), &path).unwrap();
        assert_eq!(scale.vmax, 0.0);
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (5, 3));
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn non_finite_maps_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let map = arr2(&[[f32::NAN, 0.0]]);
        match heatmap_png(&map, &dir.path().join("bad.png")) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected a non-finite error, got {other:?}"),
        }
        match grayscale_png(&Array2::zeros((0, 4)), &dir.path().join("empty.png")) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected a contract error, got {other:?}"),
        }
    }

    #[test]
    fn grayscale_clamps_and_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let image = arr2(&[[-0.5f32, 0.0, 0.5, 1.0, 2.0]]);
        grayscale_png(&image, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        let got: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        assert_eq!(got, vec![0, 0, 128, 255, 255]);
    }

    #[test]
    fn csv_builders_produce_the_documented_schemas() {
        let points = vec![
            EmbeddingPoint { id: 3, x: 0.5, y: -1.25, phenotype: 0.75, class_label: 1 },
            EmbeddingPoint { id: 7, x: -2.0, y: 0.0, phenotype: 0.1, class_label: 0 },
        ];
        assert_eq!(
            embedding_csv(&points),
            "id,x,y,phenotype,class\n3,0.5,-1.25,0.75,1\n7,-2,0,0.1,0\n"
        );

        let steps = vec![
            InterpolationStep {
                alpha: 0.0,
                image: Array2::zeros((2, 2)),
                fa_map: Array2::zeros((2, 2)),
                prediction: Prediction { class_logit: -1.5, regression_value: 0.25 },
            },
            InterpolationStep {
                alpha: 1.0,
                image: Array2::zeros((2, 2)),
                fa_map: Array2::zeros((2, 2)),
                prediction: Prediction { class_logit: 2.0, regression_value: 0.5 },
            },
        ];
        assert_eq!(
            interpolation_csv(&steps),
            "step,alpha,class_logit,regression\n0,0,-1.5,0.25\n1,1,2,0.5\n"
        );
    }
}
