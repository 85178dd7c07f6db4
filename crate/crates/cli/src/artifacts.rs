//! Output emission and external-file ingestion for the CLI: JSON dumps,
//! CSV tables, the precision/recall SVG plot, and COCO detection results.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use odontic::eval::{classes_present, PrCurve};
use odontic::pipeline::TraceRow;
use odontic::synthdata::CocoFile;
use odontic::{DetectionRecord, GroundTruth, ToothLabel};
use serde::Deserialize;

/// Writes a value as pretty-printed JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes the training loss trace as `step,total,cls,box,dn` CSV.
pub fn write_loss_trace_csv(path: &Path, trace: &[TraceRow<f64>]) -> anyhow::Result<()> {
    let mut text = String::from("step,total,cls,box,dn\n");
    for row in trace {
        writeln!(
            text,
            "{},{},{},{},{}",
            row.step, row.total, row.classification, row.localization, row.denoising
        )?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes per-class precision/recall sweeps as one flat CSV.
pub fn write_pr_csv(path: &Path, curves: &[PrCurve<f64>]) -> anyhow::Result<()> {
    let mut text = String::from("label,iou_threshold,recall,precision,score\n");
    for curve in curves {
        for point in &curve.points {
            writeln!(
                text,
                "{},{},{},{},{}",
                curve.label.prompt(),
                curve.iou_threshold,
                point.recall,
                point.precision,
                point.score
            )?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// One fixed stroke color per vocabulary label, indexed by token.
const STROKES: [&str; 4] = ["#4e79a7", "#59a14f", "#e15759", "#b07aa1"];

fn svg_x(recall: f64) -> f64 {
    MARGIN_LEFT + recall * (SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
}

fn svg_y(precision: f64) -> f64 {
    SVG_HEIGHT - MARGIN_BOTTOM - precision * (SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
}

/// Renders the curves as a fixed-size standalone SVG plot. Purely textual
/// and deterministic, so identical inputs yield identical bytes.
pub fn render_pr_svg(curves: &[PrCurve<f64>]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">"
    );
    let _ = writeln!(svg, "<rect width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" fill=\"white\"/>");
    let threshold = curves.first().map_or(0.5, |c| c.iou_threshold);
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"22\" font-size=\"15\">precision / recall at IoU {threshold}</text>",
        MARGIN_LEFT
    );
    for i in 0..=4 {
        let t = f64::from(i) / 4.0;
        let (x, y) = (svg_x(t), svg_y(t));
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>",
            svg_y(0.0),
            svg_y(1.0)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>",
            svg_x(0.0),
            svg_x(1.0)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t}</text>",
            svg_y(0.0) + 20.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{t}</text>",
            svg_x(0.0) - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">recall</text>",
        svg_x(0.5),
        SVG_HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" transform=\"rotate(-90 16 {:.2})\" \
         text-anchor=\"middle\">precision</text>",
        svg_y(0.5),
        svg_y(0.5)
    );
    for (i, curve) in curves.iter().enumerate() {
        let stroke = STROKES[curve.label.token_index()];
        if !curve.points.is_empty() {
            let mut points = String::new();
            for p in &curve.points {
                let _ = write!(points, "{:.2},{:.2} ", svg_x(p.recall), svg_y(p.precision));
            }
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"2\"/>",
                points.trim_end()
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"{stroke}\">{} (AP {:.3})</text>",
            svg_x(0.02),
            svg_y(1.0) + 18.0 + 16.0 * i as f64,
            curve.label.prompt(),
            curve.ap
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One entry of a COCO detection-results array.
#[derive(Debug, Clone, Deserialize)]
pub struct CocoResult {
    pub image_id: usize,
    pub category_id: usize,
    /// `[x, y, width, height]` in absolute pixels of the referenced image.
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Parses a COCO ground-truth file.
pub fn load_coco_file(path: &Path) -> anyhow::Result<CocoFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read ground truth {}", path.display()))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .with_context(|| format!("malformed COCO file {}", path.display()))?;
    Ok(coco)
}

/// Flattens a COCO file into normalized ground-truth records.
pub fn ground_truth_records(coco: &CocoFile) -> anyhow::Result<Vec<GroundTruth>> {
    let scenes = odontic::synthdata::scenes_from_coco::<f64>(coco)?;
    let mut gts = Vec::new();
    for scene in &scenes {
        for (label, bbox) in &scene.annotations {
            gts.push(GroundTruth { image_id: scene.image_id, label: *label, bbox: *bbox });
        }
    }
    Ok(gts)
}

/// Parses a COCO detection-results array against its ground-truth file,
/// which supplies the image sizes and category names.
pub fn load_predictions(path: &Path, gt: &CocoFile) -> anyhow::Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read predictions {}", path.display()))?;
    let results: Vec<CocoResult> = serde_json::from_str(&text)
        .with_context(|| format!("malformed results file {}", path.display()))?;

    let mut records = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let image = gt
            .images
            .iter()
            .find(|img| img.id == r.image_id)
            .with_context(|| format!("result {i} references unknown image {}", r.image_id))?;
        let category = gt
            .categories
            .iter()
            .find(|c| c.id == r.category_id)
            .with_context(|| format!("result {i} references unknown category {}", r.category_id))?;
        let label = ToothLabel::from_prompt(&category.name)
            .with_context(|| format!("unknown category name {:?}", category.name))?;
        let (w, h) = (f64::from(image.width), f64::from(image.height));
        let [bx, by, bw, bh] = r.bbox;
        let bbox = odontic::BoxXYXY::new(bx / w, by / h, (bx + bw) / w, (by + bh) / h)
            .with_context(|| format!("result {i} has an invalid box"))?;
        records.push(DetectionRecord { image_id: r.image_id, label, score: r.score, bbox });
    }
    Ok(records)
}

/// Per-class precision/recall sweeps at one IoU threshold, for every class
/// with ground truth, in token order.
pub fn pr_curves_at(
    records: &[DetectionRecord],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> anyhow::Result<Vec<PrCurve<f64>>> {
    let mut curves = Vec::new();
    for label in classes_present(gts) {
        curves.push(odontic::eval::pr_curve(records, gts, label, iou_threshold)?);
    }
    Ok(curves)
}
