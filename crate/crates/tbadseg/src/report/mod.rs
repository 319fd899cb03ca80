//! Raster artifacts: tri-planar segmentation overlays and training curves.
//!
//! Both renderers draw straight into an RGB buffer and save PNG; the only
//! text support is a small built-in 5x7 bitmap font, which keeps the output
//! byte-deterministic across platforms.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::training::TrainingHistory;
use crate::volume::{LabelMap, Volume, FL, FLT, TL};

mod font;

use font::draw_text;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
/// Fig.-1 legend mapping: TL green, FL yellow, FLT red.
const CLASS_COLORS: [(u8, Rgb<u8>); 3] =
    [(TL, Rgb([0, 255, 0])), (FL, Rgb([255, 255, 0])), (FLT, Rgb([255, 0, 0]))];
const OVERLAY_ALPHA: f32 = 0.55;
const PANEL_GAP: u32 = 6;
const CAPTION_H: u32 = 12;

fn gray_at(data: &Array3<f32>, idx: [usize; 3]) -> u8 {
    (data[idx].clamp(0.0, 1.0) * 255.0).round() as u8
}

fn class_color(label: u8) -> Option<Rgb<u8>> {
    CLASS_COLORS.iter().find(|(k, _)| *k == label).map(|(_, c)| *c)
}

fn blend(base: u8, color: Rgb<u8>) -> Rgb<u8> {
    let mix = |c: u8| ((1.0 - OVERLAY_ALPHA) * base as f32 + OVERLAY_ALPHA * c as f32) as u8;
    Rgb([mix(color[0]), mix(color[1]), mix(color[2])])
}

/// The three orthogonal mid-slice views of a `(nx, ny, nz)` grid, each as a
/// list of `(panel_x, panel_y, voxel_index)` samples plus the panel size.
struct View {
    width: u32,
    height: u32,
    /// Maps panel pixel (u, v) to the voxel index behind it.
    index: fn(&[usize; 3], usize, usize) -> [usize; 3],
}

fn views(shape: [usize; 3]) -> [(View, [usize; 3]); 3] {
    let axial = View {
        width: shape[0] as u32,
        height: shape[1] as u32,
        index: |s, u, v| [u, v, s[2] / 2],
    };
    let coronal = View {
        width: shape[0] as u32,
        height: shape[2] as u32,
        index: |s, u, v| [u, s[1] / 2, v],
    };
    let sagittal = View {
        width: shape[1] as u32,
        height: shape[2] as u32,
        index: |s, u, v| [s[0] / 2, u, v],
    };
    [(axial, shape), (coronal, shape), (sagittal, shape)]
}

/// Render one tri-planar panel image: three orthogonal mid-slices per row,
/// one row per named label map (ground truth first by convention).
pub fn render_overlay(image: &Volume, labels: &[(&str, &LabelMap)], out_path: &Path) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("render_overlay needs at least one label map".into()));
    }
    for (name, label) in labels {
        label.check_aligned(image).map_err(|e| Error::Contract(format!("label '{name}': {e}")))?;
    }
    let shape = image.shape();
    let vs = views(shape);
    let row_w: u32 =
        vs.iter().map(|(v, _)| v.width).sum::<u32>() + PANEL_GAP * (vs.len() as u32 + 1);
    let row_h = vs.iter().map(|(v, _)| v.height).max().unwrap() + CAPTION_H + PANEL_GAP;
    let total_h = row_h * labels.len() as u32 + PANEL_GAP;
    let mut canvas = RgbImage::from_pixel(row_w, total_h, BLACK);

    for (row, (name, label)) in labels.iter().enumerate() {
        let oy = PANEL_GAP + row as u32 * row_h + CAPTION_H;
        draw_text(&mut canvas, PANEL_GAP, oy - CAPTION_H + 2, name, WHITE);
        let mut ox = PANEL_GAP;
        for (view, s) in &vs {
            for v in 0..view.height as usize {
                for u in 0..view.width as usize {
                    let idx = (view.index)(s, u, v);
                    let gray = gray_at(&image.data, idx);
                    let pixel = match class_color(label.data[idx]) {
                        Some(color) => blend(gray, color),
                        None => Rgb([gray, gray, gray]),
                    };
                    canvas.put_pixel(ox + u as u32, oy + v as u32, pixel);
                }
            }
            ox += view.width + PANEL_GAP;
        }
    }
    save_png(&canvas, out_path)
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN_L: u32 = 48;
const MARGIN_R: u32 = 12;
const MARGIN_T: u32 = 12;
const MARGIN_B: u32 = 36;
const PALETTE: [Rgb<u8>; 4] =
    [Rgb([200, 40, 40]), Rgb([40, 90, 200]), Rgb([30, 150, 60]), Rgb([170, 110, 20])];

/// Plot loss (solid) and validation mean DC (dashed) for each named history
/// on shared axes, with a legend naming every run.
pub fn plot_history(histories: &[(String, &TrainingHistory)], out_path: &Path) -> Result<()> {
    if histories.is_empty() || histories.iter().any(|(_, h)| h.records.is_empty()) {
        return Err(Error::Contract("plot_history needs at least one non-empty history".into()));
    }
    let max_epoch =
        histories.iter().flat_map(|(_, h)| h.records.iter().map(|r| r.epoch)).max().unwrap();
    let mut y_max = f64::MIN;
    let mut y_min = f64::MAX;
    for (_, h) in histories {
        for r in &h.records {
            for v in [r.train_loss, r.val_mean_dice] {
                y_max = y_max.max(v);
                y_min = y_min.min(v);
            }
        }
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }

    let mut canvas = RgbImage::from_pixel(PLOT_W, PLOT_H, WHITE);
    let (x0, y0) = (MARGIN_L, PLOT_H - MARGIN_B);
    let (x1, y1) = (PLOT_W - MARGIN_R, MARGIN_T);
    let to_px = |epoch: usize, value: f64| -> (i64, i64) {
        let fx = if max_epoch == 0 { 0.0 } else { epoch as f64 / max_epoch as f64 };
        let fy = (value - y_min) / (y_max - y_min);
        (
            x0 as i64 + (fx * (x1 - x0) as f64).round() as i64,
            y0 as i64 - (fy * (y0 - y1) as f64).round() as i64,
        )
    };

    draw_line(&mut canvas, (x0 as i64, y0 as i64), (x1 as i64, y0 as i64), BLACK, false);
    draw_line(&mut canvas, (x0 as i64, y0 as i64), (x0 as i64, y1 as i64), BLACK, false);
    draw_text(&mut canvas, (x0 + x1) / 2 - 15, y0 + 20, "epoch", BLACK);
    font::draw_text_vertical(&mut canvas, 4, (y0 + y1) / 2 - 15, "value", BLACK);
    draw_text(&mut canvas, x0 - 6, y0 + 6, "0", BLACK);
    draw_text(&mut canvas, x1 - 10, y0 + 6, &max_epoch.to_string(), BLACK);
    draw_text(&mut canvas, 14, y0 - 3, &format!("{y_min:.2}"), BLACK);
    draw_text(&mut canvas, 14, y1, &format!("{y_max:.2}"), BLACK);

    for (i, (name, history)) in histories.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in history.records.windows(2) {
            let a_loss = to_px(pair[0].epoch, pair[0].train_loss);
            let b_loss = to_px(pair[1].epoch, pair[1].train_loss);
            draw_line(&mut canvas, a_loss, b_loss, color, false);
            let a_dc = to_px(pair[0].epoch, pair[0].val_mean_dice);
            let b_dc = to_px(pair[1].epoch, pair[1].val_mean_dice);
            draw_line(&mut canvas, a_dc, b_dc, color, true);
        }
        let ly = y1 as i64 + 6 + i as i64 * 12;
        draw_line(&mut canvas, (x1 as i64 - 150, ly + 3), (x1 as i64 - 130, ly + 3), color, false);
        draw_text(&mut canvas, x1 - 126, ly as u32, name, BLACK);
    }
    let note_y = y1 as i64 + 6 + histories.len() as i64 * 12;
    draw_text(&mut canvas, x1 - 150, note_y as u32, "solid loss / dash dc", BLACK);
    save_png(&canvas, out_path)
}

/// Bresenham segment; `dashed` drops every other 3-pixel run.
fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>, dashed: bool) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut step = 0u64;
    loop {
        let draw = !dashed || (step / 3) % 2 == 0;
        if draw && x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == b.0 && y == b.1 {
            break;
        }
        step += 1;
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| Error::Contract(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochRecord;
    use ndarray::Array3;

    fn test_case() -> (Volume, LabelMap) {
        let mut data = Array3::<f32>::from_elem((20, 16, 12), 0.3);
        let mut labels = Array3::<u8>::zeros((20, 16, 12));
        labels[[10, 8, 6]] = TL;
        labels[[11, 8, 6]] = FL;
        labels[[12, 8, 6]] = FLT;
        data[[10, 8, 6]] = 0.8;
        let volume = Volume::with_spacing(data, [1.0; 3], "case").unwrap();
        let label = LabelMap::with_spacing(labels, [1.0; 3], "case").unwrap();
        (volume, label)
    }

    // [TRIVIAL] one label map -> a single 1x3 row of panels.
    #[test]
    fn single_row_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let (volume, label) = test_case();
        render_overlay(&volume, &[("gt", &label)], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // panels: axial 20x16, coronal 20x12, sagittal 16x12 plus gaps
        assert_eq!(img.width(), 20 + 20 + 16 + 4 * PANEL_GAP);
        assert_eq!(img.height(), 16 + CAPTION_H + 2 * PANEL_GAP);
    }

    // [TRIVIAL] ground truth + four pipelines -> five rows.
    #[test]
    fn five_row_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let (volume, label) = test_case();
        let rows: Vec<(&str, &LabelMap)> =
            vec![("gt", &label), ("m1", &label), ("m2", &label), ("m3", &label), ("m4", &label)];
        render_overlay(&volume, &rows, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let row_h = 16 + CAPTION_H + PANEL_GAP;
        assert_eq!(img.height(), 5 * row_h + PANEL_GAP);
    }

    // [PAPER] Fig. 1 caption: "FLT(Red), TL(Green), and FL(Yellow)".
    #[test]
    fn legend_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        let (volume, label) = test_case();
        render_overlay(&volume, &[("gt", &label)], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        // axial panel origin inside the canvas
        let (ox, oy) = (PANEL_GAP, PANEL_GAP + CAPTION_H);
        let tl = img.get_pixel(ox + 10, oy + 8);
        let fl = img.get_pixel(ox + 11, oy + 8);
        let flt = img.get_pixel(ox + 12, oy + 8);
        assert!(tl[1] > tl[0] + 60 && tl[1] > tl[2] + 60, "TL not green: {tl:?}");
        assert!(fl[0] > fl[2] + 60 && fl[1] > fl[2] + 60, "FL not yellow: {fl:?}");
        assert!(flt[0] > flt[1] + 60 && flt[0] > flt[2] + 60, "FLT not red: {flt:?}");
    }

    // [DERIVED] overlaying onto a different grid is a contract violation.
    #[test]
    fn misaligned_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (volume, _) = test_case();
        let other =
            LabelMap::with_spacing(Array3::<u8>::zeros((8, 8, 8)), [1.0; 3], "other").unwrap();
        let err = render_overlay(&volume, &[("gt", &other)], &dir.path().join("x.png"));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn toy_history(offset: f64) -> TrainingHistory {
        let mut h = TrainingHistory::default();
        for epoch in 0..10 {
            h.push(EpochRecord {
                epoch,
                train_loss: 1.0 / (epoch + 1) as f64 + offset,
                val_mean_dice: 0.05 * epoch as f64 + offset,
                val_true_flt_dice: None,
                learning_rate: 1e-4,
                wall_secs: 0.1,
            });
        }
        h
    }

    // [TRIVIAL] single history renders a fixed-size plot.
    #[test]
    fn single_history_plot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.png");
        let h = toy_history(0.0);
        plot_history(&[("dcel".into(), &h)], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (PLOT_W, PLOT_H));
    }

    // [TRIVIAL] two histories draw in distinct palette colors.
    #[test]
    fn two_histories_use_distinct_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.png");
        let (a, b) = (toy_history(0.0), toy_history(0.3));
        plot_history(&[("dcel".into(), &a), ("gdl".into(), &b)], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let mut found = [false; 2];
        for pixel in img.pixels() {
            for (i, c) in PALETTE.iter().take(2).enumerate() {
                if pixel == c {
                    found[i] = true;
                }
            }
        }
        assert!(found[0] && found[1], "expected both palette colors on the canvas");
    }

    // [TRIVIAL] empty input is a contract violation, and rendering twice is
    // byte-identical.
    #[test]
    fn plot_contract_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            plot_history(&[], &dir.path().join("x.png")),
            Err(Error::Contract(_))
        ));
        let h = toy_history(0.0);
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        plot_history(&[("run".into(), &h)], &p1).unwrap();
        plot_history(&[("run".into(), &h)], &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
